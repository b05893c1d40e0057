#include "tdm/checkpoint.hpp"

#include <type_traits>

#include "binary_io.hpp"

namespace tdm {

namespace {

constexpr char kMagic[4] = {'T', 'D', 'M', 'C'};
constexpr std::size_t kHeaderBytes = 4 + sizeof(std::uint32_t) + sizeof(std::uint64_t);

template <typename T>
using Values = std::conditional_t<std::is_const_v<T>, const Eigen::VectorXd, Eigen::VectorXd>;

template <typename T>
Values<T>& values_of(T& tensor) {
    if constexpr (std::is_const_v<T>) return tensor.values();
    else return tensor.mutable_values();
}

// Visits every stored array in file order: f(name, shape, values).
template <typename C, typename F>
void visit(C& ckpt, F&& f) {
    auto& model = ckpt.model;
    for (std::size_t i = 0; i < model.backbone.blocks.size(); ++i) {
        auto& b = model.backbone.blocks[i];
        const std::string p = "backbone.block" + std::to_string(i) + ".";
        f(p + "kernel", b.kernel.shape(), values_of(b.kernel));
        f(p + "bn_scale", b.bn_scale.shape(), values_of(b.bn_scale));
        f(p + "bn_shift", b.bn_shift.shape(), values_of(b.bn_shift));
        f(p + "running_mean", ad::Shape{static_cast<std::size_t>(b.running.mean.size())}, b.running.mean);
        f(p + "running_var", ad::Shape{static_cast<std::size_t>(b.running.var.size())}, b.running.var);
    }
    const std::pair<const char*, decltype(&model.tdm.intra)> blocks[] = {
        {"intra", &model.tdm.intra}, {"inter", &model.tdm.inter}, {"query", &model.tdm.query}};
    for (auto [label, block] : blocks) {
        const std::string p = std::string("tdm.") + label + ".";
        f(p + "w1", block->w1.shape(), values_of(block->w1));
        f(p + "b1", block->b1.shape(), values_of(block->b1));
        f(p + "bn_scale", block->bn_scale.shape(), values_of(block->bn_scale));
        f(p + "bn_shift", block->bn_shift.shape(), values_of(block->bn_shift));
        f(p + "w2", block->w2.shape(), values_of(block->w2));
        f(p + "b2", block->b2.shape(), values_of(block->b2));
        f(p + "running_mean", ad::Shape{static_cast<std::size_t>(block->running.mean.size())}, block->running.mean);
        f(p + "running_var", ad::Shape{static_cast<std::size_t>(block->running.var.size())}, block->running.var);
    }
    if (ckpt.optimizer.kind == OptimizerKind::adam) {
        const auto params = model.parameters();
        const auto names = parameter_names(model);
        for (const char* moment : {"m", "v"}) {
            auto& store = moment[0] == 'm' ? ckpt.optimizer.m : ckpt.optimizer.v;
            for (std::size_t i = 0; i < names.size(); ++i)
                f(std::string("optimizer.") + moment + "." + names[i], params[i].shape(), store[i]);
        }
    }
}

std::size_t byte_count(const ad::Shape& shape) { return ad::numel(shape) * sizeof(float); }

}  // namespace

std::vector<std::string> parameter_names(const Model& model) {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < model.backbone.blocks.size(); ++i)
        for (const char* p : {"kernel", "bn_scale", "bn_shift"})
            out.push_back("backbone.block" + std::to_string(i) + "." + p);
    for (const char* block : {"intra", "inter", "query"})
        for (const char* p : {"w1", "b1", "bn_scale", "bn_shift", "w2", "b2"})
            out.push_back(std::string("tdm.") + block + "." + p);
    return out;
}

Checkpoint init_checkpoint(const RunConfig& config) {
    Checkpoint c{config, init_model(config), {config.optimizer, 0, {}, {}}, 0};
    if (config.optimizer == OptimizerKind::adam)
        for (const auto& p : c.model.parameters()) {
            c.optimizer.m.push_back(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(p.size())));
            c.optimizer.v.push_back(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(p.size())));
        }
    return c;
}

std::string serialize_checkpoint(const Checkpoint& ckpt) {
    nlohmann::json tensors = nlohmann::json::array();
    std::string payload;
    visit(ckpt, [&](const std::string& name, const ad::Shape& shape, const Eigen::VectorXd& values) {
        tensors.push_back({{"name", name}, {"shape", shape}, {"dtype", "f32"}, {"offset", payload.size()}});
        const Eigen::VectorXf narrow = values.cast<float>();
        io::append_f32(payload, {narrow.data(), static_cast<std::size_t>(narrow.size())});
    });
    const nlohmann::json manifest{{"format", "tdm-checkpoint"},
                                  {"version", kCheckpointVersion},
                                  {"step", ckpt.step},
                                  {"channels", ckpt.model.tdm.channels()},
                                  {"optimizer", {{"kind", to_string(ckpt.optimizer.kind)}, {"steps", ckpt.optimizer.steps}}},
                                  {"config", to_json(ckpt.config)},
                                  {"tensors", tensors},
                                  {"payload_bytes", payload.size()}};
    const std::string text = manifest.dump();

    std::string out(kMagic, sizeof kMagic);
    io::append_le(out, kCheckpointVersion);
    io::append_le(out, static_cast<std::uint64_t>(text.size()));
    out += text;
    out += payload;
    return out;
}

Checkpoint deserialize_checkpoint(const std::string& bytes) {
    require(bytes.size() >= sizeof kMagic && bytes.compare(0, sizeof kMagic, kMagic, sizeof kMagic) == 0,
            ErrorCode::bad_magic, "not a checkpoint file");
    require(bytes.size() >= kHeaderBytes, ErrorCode::truncated_payload, "header cut short");
    const auto version = io::read_le<std::uint32_t>(bytes.data() + 4);
    require(version == kCheckpointVersion, ErrorCode::unsupported_version,
            "checkpoint version " + std::to_string(version));
    const auto manifest_bytes = io::read_le<std::uint64_t>(bytes.data() + 8);
    require(manifest_bytes <= bytes.size() - kHeaderBytes, ErrorCode::truncated_payload, "manifest cut short");
    const std::size_t payload_start = kHeaderBytes + manifest_bytes;
    const std::size_t available = bytes.size() - payload_start;

    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(bytes.substr(kHeaderBytes, manifest_bytes));
    } catch (const nlohmann::json::exception& e) {
        raise(ErrorCode::manifest_mismatch, std::string("unreadable manifest: ") + e.what());
    }

    struct Entry {
        std::string name;
        ad::Shape shape;
        std::size_t offset;
    };
    std::vector<Entry> entries;
    std::size_t declared = 0;
    try {
        require(manifest.at("format") == "tdm-checkpoint", ErrorCode::manifest_mismatch, "wrong format tag");
        std::size_t expected_offset = 0;
        for (const auto& t : manifest.at("tensors")) {
            Entry e{t.at("name").get<std::string>(), t.at("shape").get<ad::Shape>(), t.at("offset").get<std::size_t>()};
            require(t.at("dtype") == "f32", ErrorCode::manifest_mismatch, e.name + ": dtype must be f32");
            require(e.offset == expected_offset, ErrorCode::manifest_mismatch, e.name + ": offset out of sequence");
            expected_offset += byte_count(e.shape);
            entries.push_back(std::move(e));
        }
        declared = manifest.at("payload_bytes").get<std::size_t>();
        require(declared == expected_offset, ErrorCode::manifest_mismatch, "payload size disagrees with tensor shapes");
    } catch (const nlohmann::json::exception& e) {
        raise(ErrorCode::manifest_mismatch, e.what());
    }
    require(available >= declared, ErrorCode::truncated_payload,
            "payload has " + std::to_string(available) + " bytes, manifest declares " + std::to_string(declared));
    require(available == declared, ErrorCode::manifest_mismatch, "trailing bytes after payload");

    Checkpoint ckpt;
    try {
        ckpt = init_checkpoint(run_config_from_json(manifest.at("config")));
        ckpt.step = manifest.at("step").get<std::size_t>();
        ckpt.optimizer.steps = manifest.at("optimizer").at("steps").get<std::size_t>();
        require(manifest.at("channels").get<std::size_t>() == ckpt.model.tdm.channels(), ErrorCode::manifest_mismatch,
                "channel count disagrees with the channel plan");
        require(manifest.at("optimizer").at("kind") == to_string(ckpt.optimizer.kind), ErrorCode::manifest_mismatch,
                "optimizer kind disagrees with the config");
    } catch (const nlohmann::json::exception& e) {
        raise(ErrorCode::manifest_mismatch, e.what());
    } catch (const Error& e) {
        if (e.code() != ErrorCode::invalid_config) throw;
        raise(ErrorCode::manifest_mismatch, e.what());
    }

    std::size_t index = 0;
    visit(ckpt, [&](const std::string& name, const ad::Shape& shape, Eigen::VectorXd& values) {
        require(index < entries.size(), ErrorCode::manifest_mismatch, "missing tensor " + name);
        const auto& e = entries[index++];
        require(e.name == name, ErrorCode::manifest_mismatch, "expected tensor " + name + ", found " + e.name);
        require(e.shape == shape, ErrorCode::manifest_mismatch,
                name + ": shape " + ad::shape_string(e.shape) + ", expected " + ad::shape_string(shape));
        const auto narrow = io::read_f32(bytes.data() + payload_start + e.offset, ad::numel(shape));
        values = Eigen::Map<const Eigen::VectorXf>(narrow.data(), static_cast<Eigen::Index>(narrow.size())).cast<double>();
    });
    require(index == entries.size(), ErrorCode::manifest_mismatch, "unexpected extra tensors");
    return ckpt;
}

void save_checkpoint(const Checkpoint& checkpoint, const std::string& path) {
    io::write_file(path, serialize_checkpoint(checkpoint));
}

Checkpoint load_checkpoint(const std::string& path) { return deserialize_checkpoint(io::read_file(path)); }

void round_to_f32(Checkpoint& checkpoint) {
    visit(checkpoint, [](const std::string&, const ad::Shape&, Eigen::VectorXd& values) {
        values = values.cast<float>().cast<double>();
    });
}

bool same_state(const Checkpoint& a, const Checkpoint& b) {
    std::vector<const Eigen::VectorXd*> left;
    std::vector<std::string> names;
    visit(a, [&](const std::string& name, const ad::Shape&, const Eigen::VectorXd& values) {
        names.push_back(name);
        left.push_back(&values);
    });
    std::size_t i = 0;
    bool same = a.step == b.step && a.optimizer.steps == b.optimizer.steps && a.config == b.config;
    visit(b, [&](const std::string& name, const ad::Shape&, const Eigen::VectorXd& values) {
        same = same && i < left.size() && names[i] == name && left[i]->size() == values.size() && *left[i] == values;
        ++i;
    });
    return same && i == left.size();
}

}  // namespace tdm
