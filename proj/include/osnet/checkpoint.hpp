#pragma once

#include <string>
#include <vector>

#include "json.hpp"
#include "osnet/model.hpp"

namespace osnet {

// Container layout: 8-byte magic, u32 format version, u64 header length,
// UTF-8 JSON header, then raw little-endian float64 payloads in manifest
// order. The header always carries a "tensors" manifest (name + shape);
// callers add their own sections (model_spec, arch logits, image metadata).
inline constexpr char kContainerMagic[9] = "OSNETCKP";
inline constexpr std::uint32_t kContainerVersion = 1;

struct Container {
    nlohmann::json header;
    std::vector<NamedTensor> tensors;  // in manifest order

    const Tensor& tensor(const std::string& name) const;
    bool has_tensor(const std::string& name) const;
};

void write_container(const std::string& path, nlohmann::json header,
                     const std::vector<NamedTensor>& tensors);
Container read_container(const std::string& path);

nlohmann::json model_spec_to_json(const ModelSpec& spec);
ModelSpec model_spec_from_json(const nlohmann::json& j);

void save_model(const std::string& path, Model& model,
                nlohmann::json extra_header = nlohmann::json::object());
// Rebuilds the model from the stored spec and overwrites every named tensor
// from the payload; fails if any model tensor is missing or misshaped.
Model load_model(const std::string& path);

// Single-image container used by the dataset on-disk format.
void write_image(const std::string& path, const Tensor& image, int identity_id,
                 int camera_id);
Tensor read_image(const std::string& path, int* identity_id = nullptr,
                  int* camera_id = nullptr);

}  // namespace osnet
