#include "osnet/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace osnet {

Tensor extract_features(Model& model, const std::vector<PersonImage>& images,
                        int batch_size) {
    if (images.empty()) throw EvaluationError("no images to extract features from");
    if (batch_size < 1) throw ConfigError("batch size must be positive");
    const int H = images.front().image.dim(1);
    const int W = images.front().image.dim(2);
    const int N = static_cast<int>(images.size());
    Tensor features({N, kFeatureDim});
    for (int start = 0; start < N; start += batch_size) {
        const int b = std::min(batch_size, N - start);
        Tensor batch({b, 3, H, W});
        for (int i = 0; i < b; ++i) {
            const Tensor& img = images[start + i].image;
            if (img.dim(1) != H || img.dim(2) != W) {
                throw DimensionError("images in one batch must share an extent");
            }
            std::copy(img.data(), img.data() + img.numel(),
                      batch.data() + static_cast<std::size_t>(i) * img.numel());
        }
        Tensor rows = model.features(batch, /*training=*/false);
        if (!rows.all_finite()) {
            throw EvaluationError("non-finite feature rows");
        }
        std::copy(rows.data(), rows.data() + rows.numel(),
                  features.data() + static_cast<std::size_t>(start) * kFeatureDim);
    }
    return features;
}

Tensor cosine_distance_matrix(const Tensor& queries, const Tensor& gallery) {
    if (queries.ndim() != 2 || gallery.ndim() != 2 ||
        queries.dim(1) != gallery.dim(1)) {
        throw DimensionError("feature matrices must be [n,d] with matching d");
    }
    const int nq = queries.dim(0), ng = gallery.dim(0), d = queries.dim(1);
    auto norms = [&](const Tensor& m, int n) {
        std::vector<double> out(n);
        for (int i = 0; i < n; ++i) {
            double s = 0.0;
            const double* row = m.data() + static_cast<std::size_t>(i) * d;
            for (int j = 0; j < d; ++j) s += row[j] * row[j];
            if (s == 0.0) {
                throw EvaluationError("zero-norm feature row at index " +
                                      std::to_string(i));
            }
            out[i] = std::sqrt(s);
        }
        return out;
    };
    const std::vector<double> qn = norms(queries, nq);
    const std::vector<double> gn = norms(gallery, ng);
    Tensor dist({nq, ng});
    for (int i = 0; i < nq; ++i) {
        const double* q = queries.data() + static_cast<std::size_t>(i) * d;
        for (int j = 0; j < ng; ++j) {
            const double* g = gallery.data() + static_cast<std::size_t>(j) * d;
            double dot = 0.0;
            for (int k = 0; k < d; ++k) dot += q[k] * g[k];
            dist[static_cast<std::size_t>(i) * ng + j] = 1.0 - dot / (qn[i] * gn[j]);
        }
    }
    return dist;
}

RankingResult evaluate_cmc_map(const Tensor& distmat,
                               const std::vector<SampleMeta>& query_meta,
                               const std::vector<SampleMeta>& gallery_meta) {
    const int nq = distmat.dim(0), ng = distmat.dim(1);
    if (query_meta.size() != static_cast<std::size_t>(nq) ||
        gallery_meta.size() != static_cast<std::size_t>(ng)) {
        throw DimensionError("metadata does not match the distance matrix");
    }
    RankingResult result;
    result.cmc.assign(ng, 0.0);
    int valid_queries = 0;

    std::vector<int> order(ng);
    for (int q = 0; q < nq; ++q) {
        const double* row = distmat.data() + static_cast<std::size_t>(q) * ng;
        std::iota(order.begin(), order.end(), 0);
        std::sort(order.begin(), order.end(), [&](int a, int b) {
            if (row[a] != row[b]) return row[a] < row[b];
            return a < b;
        });

        int rank = 0;            // 1-based rank within the filtered list
        int first_match = -1;
        int relevant = 0;
        double ap = 0.0;
        int hits = 0;
        for (int j : order) {
            const bool same_id = gallery_meta[j].identity == query_meta[q].identity;
            if (same_id && gallery_meta[j].camera == query_meta[q].camera) {
                continue;  // same identity seen by the same camera is excluded
            }
            ++rank;
            if (same_id) {
                ++relevant;
                ++hits;
                ap += static_cast<double>(hits) / rank;
                if (first_match < 0) first_match = rank;
            }
        }
        if (relevant == 0) {
            result.skipped_queries.push_back(q);
            continue;
        }
        ++valid_queries;
        result.per_query_ap.push_back(ap / relevant);
        result.mean_ap += ap / relevant;
        for (int k = first_match - 1; k < ng; ++k) result.cmc[k] += 1.0;
    }
    if (valid_queries == 0) {
        throw EvaluationError("no query has a valid gallery match");
    }
    result.mean_ap /= valid_queries;
    for (double& v : result.cmc) v /= valid_queries;
    result.r1 = result.cmc[std::min(ng - 1, 0)];
    result.r5 = result.cmc[std::min(ng - 1, 4)];
    result.r10 = result.cmc[std::min(ng - 1, 9)];
    return result;
}

std::vector<SampleMeta> metas_of(const std::vector<PersonImage>& images) {
    std::vector<SampleMeta> metas;
    metas.reserve(images.size());
    for (const auto& img : images) metas.push_back({img.identity, img.camera});
    return metas;
}

}  // namespace osnet
