#include "osnet/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace osnet {

namespace {

void write_u32le(std::ostream& os, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 4);
}

void write_u64le(std::ostream& os, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    os.write(reinterpret_cast<const char*>(b), 8);
}

std::uint32_t read_u32le(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}

std::uint64_t read_u64le(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return v;
}

void write_f64le(std::ostream& os, const double* data, std::size_t count) {
    if constexpr (std::endian::native == std::endian::little) {
        os.write(reinterpret_cast<const char*>(data), count * sizeof(double));
    } else {
        for (std::size_t i = 0; i < count; ++i) {
            std::uint64_t bits;
            std::memcpy(&bits, &data[i], 8);
            write_u64le(os, bits);
        }
    }
}

void read_f64le(std::istream& is, double* data, std::size_t count) {
    if constexpr (std::endian::native == std::endian::little) {
        is.read(reinterpret_cast<char*>(data), count * sizeof(double));
    } else {
        for (std::size_t i = 0; i < count; ++i) {
            const std::uint64_t bits = read_u64le(is);
            std::memcpy(&data[i], &bits, 8);
        }
    }
}

}  // namespace

const Tensor& Container::tensor(const std::string& name) const {
    for (const auto& nt : tensors) {
        if (nt.name == name) return nt.tensor;
    }
    throw ContractError("container has no tensor named '" + name + "'");
}

bool Container::has_tensor(const std::string& name) const {
    for (const auto& nt : tensors) {
        if (nt.name == name) return true;
    }
    return false;
}

void write_container(const std::string& path, nlohmann::json header,
                     const std::vector<NamedTensor>& tensors) {
    nlohmann::json manifest = nlohmann::json::array();
    for (const auto& nt : tensors) {
        manifest.push_back({{"name", nt.name}, {"shape", nt.tensor.shape()}});
    }
    header["tensors"] = std::move(manifest);
    const std::string header_str = header.dump();

    std::ofstream os(path, std::ios::binary);
    if (!os) throw ContractError("cannot open '" + path + "' for writing");
    os.write(kContainerMagic, 8);
    write_u32le(os, kContainerVersion);
    write_u64le(os, header_str.size());
    os.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
    for (const auto& nt : tensors) {
        write_f64le(os, nt.tensor.data(), nt.tensor.numel());
    }
    if (!os) throw ContractError("write failed for '" + path + "'");
}

Container read_container(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ContractError("cannot open '" + path + "' for reading");
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kContainerMagic, 8) != 0) {
        throw ContractError("'" + path + "' is not a container file (bad magic)");
    }
    const std::uint32_t version = read_u32le(is);
    if (version != kContainerVersion) {
        throw ContractError("unsupported container version " + std::to_string(version));
    }
    const std::uint64_t header_len = read_u64le(is);
    std::string header_str(header_len, '\0');
    is.read(header_str.data(), static_cast<std::streamsize>(header_len));
    if (!is) throw ContractError("truncated container header in '" + path + "'");

    Container c;
    c.header = nlohmann::json::parse(header_str);
    for (const auto& entry : c.header.at("tensors")) {
        const std::string name = entry.at("name").get<std::string>();
        const Shape shape = entry.at("shape").get<Shape>();
        Tensor t(shape);
        read_f64le(is, t.data(), t.numel());
        if (!is) throw ContractError("truncated payload for tensor '" + name + "'");
        c.tensors.push_back({name, t, true});
    }
    return c;
}

nlohmann::json model_spec_to_json(const ModelSpec& spec) {
    nlohmann::json variants = nlohmann::json::array();
    for (CandidateKind k : spec.variants) variants.push_back(candidate_name(k));
    return {{"width_multiplier", spec.width_multiplier},
            {"resolution_multiplier", spec.resolution_multiplier},
            {"variants", variants},
            {"num_classes", spec.num_classes},
            {"stream_count", spec.stream_count},
            {"gate_reduction", spec.gate_reduction},
            {"base_height", spec.base_height},
            {"base_width", spec.base_width}};
}

ModelSpec model_spec_from_json(const nlohmann::json& j) {
    ModelSpec spec;
    spec.width_multiplier = j.at("width_multiplier").get<double>();
    spec.resolution_multiplier = j.at("resolution_multiplier").get<double>();
    const auto& variants = j.at("variants");
    if (variants.size() != kOsBlockCount) {
        throw ConfigError("model spec must list exactly " +
                          std::to_string(kOsBlockCount) + " block variants");
    }
    for (int i = 0; i < kOsBlockCount; ++i) {
        spec.variants[i] = candidate_from_name(variants[i].get<std::string>());
    }
    spec.num_classes = j.at("num_classes").get<int>();
    spec.stream_count = j.value("stream_count", 4);
    spec.gate_reduction = j.value("gate_reduction", 16);
    spec.base_height = j.value("base_height", 256);
    spec.base_width = j.value("base_width", 128);
    return spec;
}

void save_model(const std::string& path, Model& model, nlohmann::json extra_header) {
    extra_header["model_spec"] = model_spec_to_json(model.spec());
    write_container(path, std::move(extra_header), model.named_tensors());
}

Model load_model(const std::string& path) {
    Container c = read_container(path);
    Model model(model_spec_from_json(c.header.at("model_spec")), /*seed=*/0);
    for (auto& nt : model.named_tensors()) {
        const Tensor& stored = c.tensor(nt.name);
        if (stored.shape() != nt.tensor.shape()) {
            throw ContractError("shape mismatch for tensor '" + nt.name + "': model " +
                                shape_str(nt.tensor.shape()) + " vs file " +
                                shape_str(stored.shape()));
        }
        std::memcpy(nt.tensor.data(), stored.data(), stored.numel() * sizeof(double));
    }
    return model;
}

void write_image(const std::string& path, const Tensor& image, int identity_id,
                 int camera_id) {
    if (image.ndim() != 3) throw DimensionError("image tensors are [3,H,W]");
    nlohmann::json header{{"kind", "image"}, {"id", identity_id}, {"camera", camera_id}};
    write_container(path, std::move(header), {{"image", image, false}});
}

Tensor read_image(const std::string& path, int* identity_id, int* camera_id) {
    Container c = read_container(path);
    if (identity_id) *identity_id = c.header.value("id", -1);
    if (camera_id) *camera_id = c.header.value("camera", -1);
    return c.tensor("image");
}

}  // namespace osnet
