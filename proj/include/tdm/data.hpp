#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "tdm/rng.hpp"
#include "tdm/tensor.hpp"

namespace tdm::data {

using ClassId = std::size_t;

struct ImageShape {
    std::size_t channels = 3;
    std::size_t height = 64;
    std::size_t width = 64;

    std::size_t numel() const noexcept { return channels * height * width; }
    bool operator==(const ImageShape&) const = default;
};

/// Parameters of the fine-grained synthetic benchmark. Each class is one of a
/// few shared "super-templates" plus a small class-unique glyph.
struct SyntheticSpec {
    std::size_t classes = 48;
    ImageShape image;
    std::size_t images_per_class = 40;
    std::size_t super_templates = 8;
    std::size_t glyph_size = 5;
    /// Glyph pixels add ±glyph_contrast to the template underneath.
    double glyph_contrast = 0.1;
    double noise_sigma = 0.1;
    std::size_t jitter = 2;
    double base_fraction = 0.5;
    std::uint64_t seed = 0;

    /// Throws InvalidSpec.
    void validate() const;
    bool operator==(const SyntheticSpec&) const = default;
};

nlohmann::json to_json(const SyntheticSpec& spec);
/// Strict: unknown keys are InvalidConfig; missing keys keep their defaults.
SyntheticSpec synthetic_spec_from_json(const nlohmann::json& j);

enum class Partition { base, novel };

/// All images of every class plus the base/novel class partition. Images of
/// class c occupy slots [c * images_per_class, (c + 1) * images_per_class).
struct DatasetSplit {
    SyntheticSpec spec;  // generator echo; image/class counts are authoritative below
    ImageShape image;
    std::size_t class_count = 0;
    std::size_t images_per_class = 0;
    std::vector<ClassId> base_classes;
    std::vector<ClassId> novel_classes;
    std::vector<float> pixels;

    std::size_t image_count() const noexcept { return class_count * images_per_class; }
    ClassId label_of(std::size_t image_index) const { return image_index / images_per_class; }
    std::span<const float> image_pixels(std::size_t image_index) const {
        return std::span(pixels).subspan(image_index * image.numel(), image.numel());
    }
    const std::vector<ClassId>& classes(Partition p) const { return p == Partition::base ? base_classes : novel_classes; }
};

struct EpisodeSpec {
    std::size_t n_way = 5;
    std::size_t k_shot = 1;
    std::size_t n_query = 16;

    /// Throws InvalidSpec unless N >= 2, K >= 1, U >= 1.
    void validate() const;
    bool operator==(const EpisodeSpec&) const = default;
};

/// One N-way K-shot task. Support and query lists are grouped by episode
/// label (label 0 first); ids index DatasetSplit images.
struct Episode {
    EpisodeSpec spec;
    std::vector<std::size_t> support_ids;
    std::vector<std::size_t> support_labels;
    std::vector<std::size_t> query_ids;
    std::vector<std::size_t> query_labels;
    std::vector<ClassId> class_map;  // episode label -> global class id
};

/// Shared appearance model behind generate_dataset; exposed so tests can
/// render noise-free canonical images.
struct SyntheticWorld {
    struct Blob {
        double cy, cx, sigma;
        std::vector<double> amplitude;  // per channel
    };
    struct Template {
        std::vector<double> background;  // per channel
        std::vector<Blob> blobs;
    };
    struct ClassDesign {
        std::size_t template_id;
        std::size_t glyph_row;
        std::size_t glyph_col;
        std::vector<double> glyph;  // channels × g × g bits
    };

    SyntheticSpec spec;
    std::vector<Template> templates;
    std::vector<ClassDesign> classes;

    static SyntheticWorld build(const SyntheticSpec& spec);

    /// Canonical image of `cls` translated by (dy, dx) and scaled by `contrast`, no noise.
    std::vector<double> render(ClassId cls, long dy = 0, long dx = 0, double contrast = 1.0) const;
};

DatasetSplit generate_dataset(const SyntheticSpec& spec);

/// Deterministic shuffled partition with |base| = round(ratio * n).
/// Throws DegeneratePartition when either side would be empty.
std::pair<std::vector<ClassId>, std::vector<ClassId>> split_base_novel(std::span<const ClassId> class_ids, double ratio,
                                                                       std::uint64_t seed);

/// Throws InsufficientClasses / InsufficientImages.
Episode sample_episode(const DatasetSplit& split, Partition part, const EpisodeSpec& spec, Rng& rng);

/// Stacks images into a B×C×H×W constant tensor.
ad::Tensor image_batch(const DatasetSplit& split, std::span<const std::size_t> ids);

/// Directory layout: manifest.json plus class_<id>.f32 (little-endian f32, N×C×H×W).
void export_dataset(const DatasetSplit& split, const std::string& directory);
DatasetSplit import_dataset(const std::string& directory);

}  // namespace tdm::data
