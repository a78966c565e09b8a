// SPDX-License-Identifier: Apache-2.0
#ifndef BNAS_MODEL_IO_HPP
#define BNAS_MODEL_IO_HPP

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "bnas/elasticity.hpp"
#include "bnas/engine.hpp"
#include "bnas/graph.hpp"
#include "bnas/settings.hpp"

namespace bnas {

namespace fs = std::filesystem;

inline constexpr int kFormatVersion = 1;

/// Samples stored flat in NCHW order, pixels in [0, 1].
struct Dataset {
    std::int64_t channels = 0, height = 0, width = 0;
    std::int64_t num_classes = 0;
    std::vector<float> images;
    std::vector<std::int32_t> labels;

    std::int64_t size() const noexcept { return static_cast<std::int64_t>(labels.size()); }
    std::int64_t sample_numel() const noexcept { return channels * height * width; }
    TensorShape sample_shape() const { return TensorShape{channels, height, width}; }

    /// Samples [begin, begin + count) clipped to the end.
    Batch batch(std::int64_t begin, std::int64_t count) const;
    /// Samples at the given indices, in that order.
    Batch gather(std::span<const std::int64_t> indices) const;
    Dataset head(std::int64_t count) const;
};

std::uint64_t fnv1a64(std::span<const unsigned char> bytes) noexcept;

/// Writes `bytes` to a sibling temporary and renames it over `path`.
void write_file_atomic(const fs::path& path, std::string_view bytes);
std::string read_file(const fs::path& path);

/// Manifest document (structured text) and little-endian f32 payload.
std::string model_manifest(const ModelGraph& graph, std::string_view payload);
std::string weight_payload(const ModelGraph& graph);
ModelGraph parse_model(std::string_view manifest, std::string_view payload);

ModelGraph load_model(const fs::path& manifest_path, const fs::path& weights_path);
void save_model(const ModelGraph& graph, const fs::path& manifest_path, const fs::path& weights_path);

/// IDX images (magic 0x803: N,H,W unsigned bytes) and labels (0x801).
/// limit <= 0 reads everything. num_classes <= 0 infers max label + 1.
Dataset load_idx_dataset(const fs::path& images_path, const fs::path& labels_path, std::int64_t limit = 0,
                         std::int64_t num_classes = 0);
/// Pixels rounded to bytes; single-channel datasets only.
void save_idx_dataset(const Dataset& data, const fs::path& images_path, const fs::path& labels_path);

/// Class c pixels ~ clip(N((c + 0.5) / num_classes, 0.1), 0, 1), labels uniform.
Dataset make_synthetic_dataset(std::uint64_t seed, std::int64_t num_samples, std::int64_t num_classes,
                               const TensorShape& shape);

std::string to_json(const SubnetworkConfig& config);
SubnetworkConfig subnetwork_config_from_json(std::string_view text);

std::string to_json(const RunConfig& config);
/// Missing keys keep their defaults; unknown keys and invalid values throw ConfigError.
RunConfig run_config_from_json(std::string_view text);
std::string to_json(const ElasticityPolicy& policy);
ElasticityPolicy policy_from_json(std::string_view text);

std::string to_json(const SearchSpace& space);

/// Converted super-network on disk: model.json + model.bin + space.json.
void save_supernet(const SuperNetwork& net, const ElasticityPolicy& policy, const fs::path& dir);
struct LoadedSupernet {
    SuperNetwork net;
    ElasticityPolicy policy;
};
/// Rebuilds the space from the graph and checks it against space.json.
LoadedSupernet load_supernet(const fs::path& dir);

struct ArchiveRow {
    std::string config_id;
    std::int64_t macs = 0;
    std::int64_t params = 0;
    double top1_accuracy = 0.0;
    int rank = 0;
    double crowding = 0.0;

    friend bool operator==(const ArchiveRow&, const ArchiveRow&) = default;
};

std::string archive_csv(std::span<const ArchiveRow> rows);
std::vector<ArchiveRow> parse_archive_csv(std::string_view text);

} // namespace bnas

#endif // BNAS_MODEL_IO_HPP
