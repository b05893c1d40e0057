#include "tdm/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <iomanip>
#include <set>
#include <sstream>

#include "binary_io.hpp"

namespace tdm::data {

namespace {

constexpr std::uint64_t kWorldStream = 0;
constexpr std::uint64_t kSplitStream = 0x5e11;
constexpr std::uint64_t kInstanceStreamBase = 1;
constexpr int kManifestVersion = 1;

std::string class_file_name(ClassId id) {
    std::ostringstream os;
    os << "class_" << std::setw(4) << std::setfill('0') << id << ".f32";
    return os.str();
}

}  // namespace

void SyntheticSpec::validate() const {
    require(classes >= 2, ErrorCode::invalid_spec, "need at least two classes");
    require(images_per_class >= 1, ErrorCode::invalid_spec, "need at least one image per class");
    require(image.channels >= 1 && image.height >= 1 && image.width >= 1, ErrorCode::invalid_spec,
            "image dimensions must be positive");
    require(super_templates >= 1, ErrorCode::invalid_spec, "need at least one super-template");
    require(glyph_size >= 1, ErrorCode::invalid_spec, "glyph size must be positive");
    require(glyph_size + 2 * jitter <= std::min(image.height, image.width), ErrorCode::invalid_spec,
            "glyph does not fit inside the image after maximal jitter");
    require(noise_sigma >= 0.0 && std::isfinite(noise_sigma), ErrorCode::invalid_spec, "noise sigma must be >= 0");
    require(glyph_contrast > 0.0 && std::isfinite(glyph_contrast), ErrorCode::invalid_spec,
            "glyph contrast must be positive");
    require(base_fraction > 0.0 && base_fraction < 1.0, ErrorCode::invalid_spec, "base fraction must be in (0,1)");
}

void EpisodeSpec::validate() const {
    require(n_way >= 2, ErrorCode::invalid_spec, "episodes need N >= 2 classes");
    require(k_shot >= 1, ErrorCode::invalid_spec, "episodes need K >= 1 support images per class");
    require(n_query >= 1, ErrorCode::invalid_spec, "episodes need U >= 1 queries per class");
}

nlohmann::json to_json(const SyntheticSpec& s) {
    return {{"classes", s.classes},
            {"channels", s.image.channels},
            {"height", s.image.height},
            {"width", s.image.width},
            {"images_per_class", s.images_per_class},
            {"super_templates", s.super_templates},
            {"glyph_size", s.glyph_size},
            {"glyph_contrast", s.glyph_contrast},
            {"noise_sigma", s.noise_sigma},
            {"jitter", s.jitter},
            {"base_fraction", s.base_fraction},
            {"seed", s.seed}};
}

SyntheticSpec synthetic_spec_from_json(const nlohmann::json& j) {
    require(j.is_object(), ErrorCode::invalid_config, "dataset spec must be a JSON object");
    SyntheticSpec s;
    for (const auto& [key, value] : j.items()) {
        try {
            if (key == "classes") s.classes = value.get<std::size_t>();
            else if (key == "channels") s.image.channels = value.get<std::size_t>();
            else if (key == "height") s.image.height = value.get<std::size_t>();
            else if (key == "width") s.image.width = value.get<std::size_t>();
            else if (key == "images_per_class") s.images_per_class = value.get<std::size_t>();
            else if (key == "super_templates") s.super_templates = value.get<std::size_t>();
            else if (key == "glyph_size") s.glyph_size = value.get<std::size_t>();
            else if (key == "glyph_contrast") s.glyph_contrast = value.get<double>();
            else if (key == "noise_sigma") s.noise_sigma = value.get<double>();
            else if (key == "jitter") s.jitter = value.get<std::size_t>();
            else if (key == "base_fraction") s.base_fraction = value.get<double>();
            else if (key == "seed") s.seed = value.get<std::uint64_t>();
            else raise(ErrorCode::invalid_config, "unknown dataset key '" + key + "'");
        } catch (const nlohmann::json::exception& e) {
            raise(ErrorCode::invalid_config, "dataset key '" + key + "': " + e.what());
        }
    }
    return s;
}

SyntheticWorld SyntheticWorld::build(const SyntheticSpec& spec) {
    spec.validate();
    SyntheticWorld world;
    world.spec = spec;
    Rng rng(derive_seed(spec.seed, kWorldStream));
    const auto h = static_cast<double>(spec.image.height);
    const auto w = static_cast<double>(spec.image.width);
    const std::size_t channels = spec.image.channels;

    world.templates.resize(spec.super_templates);
    for (auto& t : world.templates) {
        t.background.resize(channels);
        for (auto& b : t.background) b = rng.uniform(0.2, 0.5);
        t.blobs.resize(4);
        for (auto& blob : t.blobs) {
            blob.cy = rng.uniform(0.0, h);
            blob.cx = rng.uniform(0.0, w);
            blob.sigma = rng.uniform(h / 8.0, h / 4.0);
            blob.amplitude.resize(channels);
            for (auto& a : blob.amplitude) a = rng.uniform(-0.3, 0.5);
        }
    }

    const std::size_t g = spec.glyph_size;
    world.classes.resize(spec.classes);
    for (std::size_t c = 0; c < spec.classes; ++c) {
        auto& design = world.classes[c];
        design.template_id = c % spec.super_templates;
        design.glyph_row = static_cast<std::size_t>(
            rng.range(static_cast<long>(spec.jitter), static_cast<long>(spec.image.height - g - spec.jitter)));
        design.glyph_col = static_cast<std::size_t>(
            rng.range(static_cast<long>(spec.jitter), static_cast<long>(spec.image.width - g - spec.jitter)));
        design.glyph.resize(channels * g * g);
        for (auto& v : design.glyph) v = rng.uniform() < 0.5 ? 0.0 : 1.0;
    }
    return world;
}

std::vector<double> SyntheticWorld::render(ClassId cls, long dy, long dx, double contrast) const {
    const auto& design = classes.at(cls);
    const auto& tpl = templates[design.template_id];
    const std::size_t channels = spec.image.channels, h = spec.image.height, w = spec.image.width;
    const auto g = static_cast<long>(spec.glyph_size);
    std::vector<double> img(channels * h * w);
    for (std::size_t c = 0; c < channels; ++c)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) {
                // Source coordinates in the unshifted canonical image.
                const long sy = static_cast<long>(y) - dy;
                const long sx = static_cast<long>(x) - dx;
                const long gy = sy - static_cast<long>(design.glyph_row);
                const long gx = sx - static_cast<long>(design.glyph_col);
                double v = tpl.background[c];
                for (const auto& blob : tpl.blobs) {
                    const double ry = static_cast<double>(sy) - blob.cy;
                    const double rx = static_cast<double>(sx) - blob.cx;
                    v += blob.amplitude[c] * std::exp(-(ry * ry + rx * rx) / (2.0 * blob.sigma * blob.sigma));
                }
                if (gy >= 0 && gy < g && gx >= 0 && gx < g) {
                    const double bit = design.glyph[(c * static_cast<std::size_t>(g) + static_cast<std::size_t>(gy)) *
                                                        static_cast<std::size_t>(g) +
                                                    static_cast<std::size_t>(gx)];
                    v += spec.glyph_contrast * (2.0 * bit - 1.0);
                }
                img[(c * h + y) * w + x] = contrast * v;
            }
    return img;
}

DatasetSplit generate_dataset(const SyntheticSpec& spec) {
    const auto world = SyntheticWorld::build(spec);
    DatasetSplit split;
    split.spec = spec;
    split.image = spec.image;
    split.class_count = spec.classes;
    split.images_per_class = spec.images_per_class;
    split.pixels.resize(split.image_count() * spec.image.numel());

    const auto jitter = static_cast<long>(spec.jitter);
    for (std::size_t c = 0; c < spec.classes; ++c) {
        Rng rng(derive_seed(spec.seed, kInstanceStreamBase + c));
        for (std::size_t k = 0; k < spec.images_per_class; ++k) {
            const long dy = rng.range(-jitter, jitter);
            const long dx = rng.range(-jitter, jitter);
            const double contrast = rng.uniform(0.9, 1.1);
            const auto img = world.render(c, dy, dx, contrast);
            float* dst = split.pixels.data() + (c * spec.images_per_class + k) * spec.image.numel();
            for (std::size_t i = 0; i < img.size(); ++i)
                dst[i] = static_cast<float>(img[i] + spec.noise_sigma * rng.normal());
        }
    }

    std::vector<ClassId> ids(spec.classes);
    for (std::size_t c = 0; c < ids.size(); ++c) ids[c] = c;
    std::tie(split.base_classes, split.novel_classes) =
        split_base_novel(ids, spec.base_fraction, derive_seed(spec.seed, kSplitStream));
    return split;
}

std::pair<std::vector<ClassId>, std::vector<ClassId>> split_base_novel(std::span<const ClassId> class_ids, double ratio,
                                                                       std::uint64_t seed) {
    require(ratio > 0.0 && ratio < 1.0, ErrorCode::invalid_spec, "split ratio must be in (0,1)");
    std::vector<ClassId> ids(class_ids.begin(), class_ids.end());
    const auto n_base = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(ids.size())));
    require(n_base > 0 && n_base < ids.size(), ErrorCode::degenerate_partition,
            "ratio " + std::to_string(ratio) + " over " + std::to_string(ids.size()) + " classes leaves a side empty");
    Rng rng(seed);
    rng.shuffle(std::span(ids));
    std::vector<ClassId> base(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_base));
    std::vector<ClassId> novel(ids.begin() + static_cast<std::ptrdiff_t>(n_base), ids.end());
    std::sort(base.begin(), base.end());
    std::sort(novel.begin(), novel.end());
    return {std::move(base), std::move(novel)};
}

Episode sample_episode(const DatasetSplit& split, Partition part, const EpisodeSpec& spec, Rng& rng) {
    spec.validate();
    const auto& pool = split.classes(part);
    require(pool.size() >= spec.n_way, ErrorCode::insufficient_classes,
            std::to_string(spec.n_way) + "-way episode from " + std::to_string(pool.size()) + " classes");
    const std::size_t per_class = spec.k_shot + spec.n_query;
    require(split.images_per_class >= per_class, ErrorCode::insufficient_images,
            "need " + std::to_string(per_class) + " images per class, have " + std::to_string(split.images_per_class));

    Episode ep;
    ep.spec = spec;
    std::vector<ClassId> classes(pool.begin(), pool.end());
    rng.partial_shuffle(std::span(classes), spec.n_way);
    ep.class_map.assign(classes.begin(), classes.begin() + static_cast<std::ptrdiff_t>(spec.n_way));

    std::vector<std::size_t> slots(split.images_per_class);
    for (std::size_t label = 0; label < spec.n_way; ++label) {
        for (std::size_t k = 0; k < slots.size(); ++k) slots[k] = k;
        rng.partial_shuffle(std::span(slots), per_class);
        const std::size_t first = ep.class_map[label] * split.images_per_class;
        for (std::size_t k = 0; k < spec.k_shot; ++k) {
            ep.support_ids.push_back(first + slots[k]);
            ep.support_labels.push_back(label);
        }
        for (std::size_t k = spec.k_shot; k < per_class; ++k) {
            ep.query_ids.push_back(first + slots[k]);
            ep.query_labels.push_back(label);
        }
    }
    return ep;
}

ad::Tensor image_batch(const DatasetSplit& split, std::span<const std::size_t> ids) {
    const std::size_t n = split.image.numel();
    Eigen::VectorXd values(static_cast<Eigen::Index>(ids.size() * n));
    for (std::size_t b = 0; b < ids.size(); ++b) {
        const auto px = split.image_pixels(ids[b]);
        for (std::size_t i = 0; i < n; ++i) values[static_cast<Eigen::Index>(b * n + i)] = px[i];
    }
    return ad::Tensor::from_values({ids.size(), split.image.channels, split.image.height, split.image.width},
                                   std::move(values));
}

void export_dataset(const DatasetSplit& split, const std::string& directory) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(directory, ec);
    require(!ec, ErrorCode::io_error, "cannot create " + directory + ": " + ec.message());

    nlohmann::json files = nlohmann::json::array();
    nlohmann::json ids = nlohmann::json::array();
    const std::size_t per_class = split.images_per_class * split.image.numel();
    for (ClassId c = 0; c < split.class_count; ++c) {
        std::string bytes;
        io::append_f32(bytes, std::span(split.pixels).subspan(c * per_class, per_class));
        io::write_file((fs::path(directory) / class_file_name(c)).string(), bytes);
        files.push_back(class_file_name(c));
        ids.push_back(c);
    }
    const nlohmann::json manifest = {
        {"format", "tdm-dataset"},
        {"version", kManifestVersion},
        {"class_ids", ids},
        {"base_classes", split.base_classes},
        {"novel_classes", split.novel_classes},
        {"images_per_class", split.images_per_class},
        {"shape", {split.image.channels, split.image.height, split.image.width}},
        {"dtype", "f32"},
        {"byte_order", "little"},
        {"seed", split.spec.seed},
        {"spec", to_json(split.spec)},
        {"files", files},
    };
    io::write_file((fs::path(directory) / "manifest.json").string(), manifest.dump(2) + "\n");
}

DatasetSplit import_dataset(const std::string& directory) {
    namespace fs = std::filesystem;
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(io::read_file((fs::path(directory) / "manifest.json").string()));
    } catch (const nlohmann::json::exception& e) {
        raise(ErrorCode::manifest_mismatch, std::string("unreadable dataset manifest: ") + e.what());
    }
    DatasetSplit split;
    try {
        require(manifest.at("format") == "tdm-dataset", ErrorCode::manifest_mismatch, "not a tdm dataset");
        require(manifest.at("version").get<int>() == kManifestVersion, ErrorCode::unsupported_version,
                "dataset manifest version " + manifest.at("version").dump());
        split.spec = synthetic_spec_from_json(manifest.at("spec"));
        const auto shape = manifest.at("shape").get<std::vector<std::size_t>>();
        require(shape.size() == 3, ErrorCode::manifest_mismatch, "image shape must be C×H×W");
        split.image = {shape[0], shape[1], shape[2]};
        split.images_per_class = manifest.at("images_per_class").get<std::size_t>();
        const auto ids = manifest.at("class_ids").get<std::vector<ClassId>>();
        const auto files = manifest.at("files").get<std::vector<std::string>>();
        split.base_classes = manifest.at("base_classes").get<std::vector<ClassId>>();
        split.novel_classes = manifest.at("novel_classes").get<std::vector<ClassId>>();
        split.class_count = ids.size();
        require(files.size() == ids.size(), ErrorCode::manifest_mismatch, "one file per class expected");
        for (std::size_t i = 0; i < ids.size(); ++i)
            require(ids[i] == i, ErrorCode::manifest_mismatch, "class ids must be 0..n-1 in order");

        std::set<ClassId> seen;
        for (auto c : split.base_classes) seen.insert(c);
        for (auto c : split.novel_classes)
            require(seen.insert(c).second, ErrorCode::manifest_mismatch, "base and novel classes overlap");
        require(seen.size() == ids.size() && *seen.rbegin() < ids.size(), ErrorCode::manifest_mismatch,
                "split membership must cover every class exactly once");

        const std::size_t per_class = split.images_per_class * split.image.numel();
        split.pixels.reserve(per_class * ids.size());
        for (const auto& file : files) {
            const auto bytes = io::read_file((fs::path(directory) / file).string());
            require(bytes.size() >= per_class * sizeof(float), ErrorCode::truncated_payload, file + " is too short");
            require(bytes.size() == per_class * sizeof(float), ErrorCode::manifest_mismatch,
                    file + " is larger than the manifest declares");
            const auto values = io::read_f32(bytes.data(), per_class);
            split.pixels.insert(split.pixels.end(), values.begin(), values.end());
        }
    } catch (const nlohmann::json::exception& e) {
        raise(ErrorCode::manifest_mismatch, std::string("dataset manifest: ") + e.what());
    }
    return split;
}

}  // namespace tdm::data
