#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "tdm/checkpoint.hpp"
#include "tdm/config.hpp"
#include "tdm/harness.hpp"

namespace fs = std::filesystem;
using namespace tdm;

namespace {

struct Common {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string out = "out";
    std::size_t workers = 1;
};

void add_common(CLI::App& cmd, Common& c) {
    cmd.add_option("--config", c.config_path, "JSON run configuration (defaults when omitted)");
    cmd.add_option("--seed", c.seed, "Overrides the configured seed");
    cmd.add_option("--out", c.out, "Output directory")->capture_default_str();
}

RunConfig resolve_config(const Common& c) {
    RunConfig config = c.config_path.empty() ? RunConfig{} : load_run_config(c.config_path);
    if (c.seed) config.seed = *c.seed;
    config.validate();
    return config;
}

void write_text(const fs::path& path, const std::string& text) {
    fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrorCode::io_error, "cannot write " + path.string());
    out << text;
}

fs::path prepare(const Common& c) {
    fs::create_directories(c.out);
    return fs::path(c.out);
}

void log_progress(std::size_t step, std::size_t total, double loss) {
    if (step % 100 == 0 || step == total) std::cerr << "step " << step << "/" << total << "  loss " << loss << "\n";
}

}  // namespace

int main(int argc, char** argv) {
    tune_allocator();
    CLI::App app{"Episodic few-shot training with task discrepancy maximization"};
    app.require_subcommand(1);

    Common gen_opts, train_opts, eval_opts, ablate_opts, export_opts, grad_opts;

    auto* gen = app.add_subcommand("gen-data", "Generate the synthetic dataset and export it");
    add_common(*gen, gen_opts);

    auto* train_cmd = app.add_subcommand("train", "Train and write checkpoint.tdmc and loss.csv");
    add_common(*train_cmd, train_opts);

    auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on novel episodes, write eval.json");
    add_common(*eval_cmd, eval_opts);
    std::string eval_ckpt;
    std::optional<std::size_t> eval_episodes;
    eval_cmd->add_option("--checkpoint", eval_ckpt, "Checkpoint file (default <out>/checkpoint.tdmc)");
    eval_cmd->add_option("--episodes", eval_episodes, "Overrides the configured evaluation episode count");
    eval_cmd->add_option("--workers", eval_opts.workers, "Evaluation threads")->capture_default_str();

    auto* ablate_cmd = app.add_subcommand("ablate", "Train and evaluate the SAM x QAM grid, write ablation.csv");
    add_common(*ablate_cmd, ablate_opts);
    std::vector<std::string> poolings, metrics;
    ablate_cmd->add_option("--poolings", poolings, "Pooling variants (avg, max); default: configured")->delimiter(',');
    ablate_cmd->add_option("--metrics", metrics, "Metric variants (squared_euclidean, cosine); default: configured")
        ->delimiter(',');
    ablate_cmd->add_option("--workers", ablate_opts.workers, "Evaluation threads")->capture_default_str();

    auto* export_cmd = app.add_subcommand("export-weights", "Write channel-weight and aggregated-map CSVs");
    add_common(*export_cmd, export_opts);
    std::string export_ckpt;
    std::uint64_t episode_seed = 0;
    double drop_fraction = 0.25;
    export_cmd->add_option("--checkpoint", export_ckpt, "Checkpoint file (default: untrained model from config)");
    export_cmd->add_option("--episode-seed", episode_seed, "Seed of the exported novel episode")->capture_default_str();
    export_cmd->add_option("--drop-fraction", drop_fraction, "Channel variance mask fraction")->capture_default_str();

    auto* grad_cmd = app.add_subcommand("grad-check", "Finite-difference check of every parameter gradient on a fixed tiny model");
    add_common(*grad_cmd, grad_opts);

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) {
            auto config = resolve_config(gen_opts);
            if (gen_opts.seed) config.dataset.seed = *gen_opts.seed;
            const auto dir = prepare(gen_opts) / "dataset";
            data::export_dataset(data::generate_dataset(config.dataset), dir.string());
            std::cout << "wrote " << dir.string() << "\n";
        } else if (train_cmd->parsed()) {
            const auto config = resolve_config(train_opts);
            const auto dir = prepare(train_opts);
            const auto split = load_dataset(config);
            std::vector<double> losses;
            const auto ckpt = train(config, split, &losses, [&](std::size_t step, double loss) {
                log_progress(step, config.train_episodes, loss);
            });
            save_checkpoint(ckpt, (dir / "checkpoint.tdmc").string());
            std::ostringstream csv;
            csv << "step,loss\n" << std::setprecision(17);
            for (std::size_t i = 0; i < losses.size(); ++i) csv << i + 1 << ',' << losses[i] << '\n';
            write_text(dir / "loss.csv", csv.str());
            write_text(dir / "config.json", to_json(config).dump(2) + "\n");
            std::cout << "wrote " << (dir / "checkpoint.tdmc").string() << "\n";
        } else if (eval_cmd->parsed()) {
            const auto dir = prepare(eval_opts);
            const auto path = eval_ckpt.empty() ? (dir / "checkpoint.tdmc").string() : eval_ckpt;
            const auto ckpt = load_checkpoint(path);
            const std::uint64_t seed = eval_opts.seed.value_or(ckpt.config.seed);
            const std::size_t episodes = eval_episodes.value_or(ckpt.config.eval_episodes);
            const auto split = load_dataset(ckpt.config);
            const auto report = evaluate(ckpt, split, episodes, seed, {eval_opts.workers, false});
            write_text(dir / "eval.json", eval_json(report, seed, ckpt.config).dump(2) + "\n");
            std::cout << "accuracy " << report.mean << " +- " << report.half_width << " (n=" << report.n << ")\n";
        } else if (ablate_cmd->parsed()) {
            const auto config = resolve_config(ablate_opts);
            const auto dir = prepare(ablate_opts);
            AblationOptions opts;
            for (const auto& p : poolings)
                opts.poolings.push_back(run_config_from_json({{"pooling", p}}).pooling);
            for (const auto& m : metrics) opts.metrics.push_back(run_config_from_json({{"metric", m}}).metric);
            opts.workers = ablate_opts.workers;
            opts.on_cell = [](const AblationCell& c) {
                std::cerr << "sam=" << c.sam << " qam=" << c.qam << " " << to_string(c.pooling) << " "
                          << to_string(c.metric) << ": " << c.report.mean << " +- " << c.report.half_width << "\n";
            };
            const auto split = load_dataset(config);
            const auto cells = ablate(config, split, opts);
            const auto csv = ablation_csv(cells);
            write_text(dir / "ablation.csv", csv);
            std::cout << csv;
        } else if (export_cmd->parsed()) {
            const auto dir = prepare(export_opts);
            std::optional<Checkpoint> ckpt;
            if (!export_ckpt.empty()) ckpt = load_checkpoint(export_ckpt);
            const auto config = ckpt ? ckpt->config : resolve_config(export_opts);
            const Model model = ckpt ? ckpt->model : init_model(config);
            const auto split = load_dataset(config);
            Rng rng(episode_seed);
            const auto episode = data::sample_episode(split, data::Partition::novel, config.episode, rng);
            export_channel_weights(model, split, episode, dir.string(), drop_fraction);
            std::cout << "wrote channel_weights.csv, aggregated_maps.csv, channel_variance.csv to " << dir.string()
                      << "\n";
        } else if (grad_cmd->parsed()) {
            const auto dir = prepare(grad_opts);
            GradCheckOptions opts;
            opts.seed = grad_opts.seed.value_or(0);
            try {
                const auto text = format_grad_check(grad_check(opts));
                write_text(dir / "grad_check.txt", text);
                std::cout << text << "PASS\n";
            } catch (const Error& e) {
                if (e.code() != ErrorCode::tolerance_exceeded) throw;
                write_text(dir / "grad_check.txt", e.what());
                std::cout << e.what() << "FAIL\n";
                return 1;
            }
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
