#pragma once

#include <vector>

#include "osnet/data.hpp"
#include "osnet/model.hpp"

namespace osnet {

struct SampleMeta {
    int identity = -1;
    int camera = -1;
};

struct RankingResult {
    std::vector<double> cmc;  // cmc[k-1] = CMC@k, k up to the gallery size
    double r1 = 0.0, r5 = 0.0, r10 = 0.0;
    double mean_ap = 0.0;
    std::vector<double> per_query_ap;  // valid queries, in query order
    std::vector<int> skipped_queries;  // no valid match after filtering
};

// Eval-mode forward (BN running stats, no recording), batched; rows must be
// finite.
Tensor extract_features(Model& model, const std::vector<PersonImage>& images,
                        int batch_size = 32);

// d(q, g) = 1 - q.g / (|q||g|), in [0, 2]. Zero-norm rows are an
// EvaluationError.
Tensor cosine_distance_matrix(const Tensor& queries, const Tensor& gallery);

// Single-query protocol: per query, gallery entries sharing both identity and
// camera are excluded; CMC@k is the fraction of queries whose first correct
// match lands in the top k; AP averages precision at each relevant hit. Ties
// in distance break by gallery index.
RankingResult evaluate_cmc_map(const Tensor& distmat,
                               const std::vector<SampleMeta>& query_meta,
                               const std::vector<SampleMeta>& gallery_meta);

std::vector<SampleMeta> metas_of(const std::vector<PersonImage>& images);

}  // namespace osnet
