#include <cerrno>
#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "tokenseg/config.hpp"
#include "tokenseg/experiment.hpp"
#include "tokenseg/gradcheck.hpp"
#include "tokenseg/model.hpp"
#include "tokenseg/trainer.hpp"

namespace {

using namespace tokenseg;

std::vector<std::string> split_csv(const std::string& csv) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : csv) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    out.push_back(cur);
    for (const std::string& s : out) {
        if (s.empty()) throw std::invalid_argument("empty entry in list '" + csv + "'");
    }
    return out;
}

std::vector<uint64_t> parse_seed_list(const std::string& csv) {
    std::vector<uint64_t> out;
    for (const std::string& s : split_csv(csv)) {
        errno = 0;
        char* end = nullptr;
        const unsigned long long v = std::strtoull(s.c_str(), &end, 10);
        if (errno != 0 || end != s.c_str() + s.size()) {
            throw std::invalid_argument("bad seed '" + s + "'");
        }
        out.push_back(static_cast<uint64_t>(v));
    }
    return out;
}

int cmd_train(const std::string& config_path) {
    const ExperimentConfig cfg = parse_config(config_path);
    const RunRecord rec = run_experiment(cfg);
    std::printf("run complete: %s\n", cfg.output_dir.c_str());
    std::printf("steps=%zu final_miou=%.6f wall_seconds=%.1f\n", rec.metrics.size(),
                static_cast<double>(rec.final_val.miou), rec.wall_seconds);
    return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& config_path) {
    const ExperimentConfig cfg = parse_config(config_path);
    const SegmenterModel model = load_checkpoint(ckpt_path);
    if (!(model.config() == cfg.model)) {
        throw std::runtime_error("checkpoint model geometry does not match the config");
    }
    const Splits splits = make_splits(cfg.data, cfg.model.image_size, cfg.model.num_classes);
    const IouReport report = evaluate_model(model, splits.val);
    std::printf("val_miou=%.6f\n", static_cast<double>(report.miou));
    for (size_t c = 0; c < report.per_class.size(); ++c) {
        std::printf("class_%zu_iou=%.6f\n", c, static_cast<double>(report.per_class[c]));
    }
    return 0;
}

int cmd_grid(const std::string& config_path, const std::string& axis, const std::string& values,
             const std::string& seeds) {
    const ExperimentConfig base = parse_config(config_path);
    const int threads = grid_threads_from_env();
    const GridResult res = run_ablation_grid(base, axis, split_csv(values),
                                             parse_seed_list(seeds), threads);
    std::printf("%s", res.table.c_str());
    int failed = 0;
    for (const GridCell& cell : res.cells) {
        if (!cell.ok) {
            ++failed;
            std::fprintf(stderr, "cell %s=%s seed=%llu failed: %s\n", res.axis.c_str(),
                         cell.value.c_str(), static_cast<unsigned long long>(cell.seed),
                         cell.error.c_str());
        }
    }
    return failed == 0 ? 0 : 1;
}

int cmd_gradcheck(int n_seeds, double tol) {
    std::vector<uint64_t> seeds;
    for (int s = 1; s <= n_seeds; ++s) seeds.push_back(static_cast<uint64_t>(s));
    const std::vector<FdCase> cases = run_fd_suite(seeds, static_cast<real>(tol));
    int failed = 0;
    for (const FdCase& c : cases) {
        std::printf("op=%s max_rel_err=%.3g %s\n", c.name.c_str(),
                    static_cast<double>(c.max_rel_err), c.pass ? "pass" : "FAIL");
        if (!c.pass) ++failed;
    }
    return failed == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"semi-supervised patch-token segmentation on synthetic scenes"};
    app.require_subcommand(1);

    std::string config_path, ckpt_path, axis, values, seeds = "1,2,3";
    int gc_seeds = 20;
    double gc_tol = 1e-4;

    CLI::App* train_cmd = app.add_subcommand("train", "train per config and write run outputs");
    train_cmd->add_option("config", config_path, "config file")->required();

    CLI::App* eval_cmd =
        app.add_subcommand("eval", "evaluate a checkpoint on the config's val split");
    eval_cmd->add_option("checkpoint", ckpt_path, "checkpoint file")->required();
    eval_cmd->add_option("config", config_path, "config file")->required();

    CLI::App* grid_cmd = app.add_subcommand("grid", "ablation grid along one axis");
    grid_cmd->add_option("config", config_path, "base config file")->required();
    grid_cmd->add_option("--axis", axis, "augmentation|branch_design|rho|theta")->required();
    grid_cmd->add_option("--values", values, "comma-separated axis values")->required();
    grid_cmd->add_option("--seeds", seeds, "comma-separated seeds (default 1,2,3)");

    CLI::App* gc_cmd = app.add_subcommand("gradcheck", "finite-difference audit of every op");
    gc_cmd->add_option("--seeds", gc_seeds, "number of seeds (default 20)");
    gc_cmd->add_option("--tol", gc_tol, "max relative error (default 1e-4)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (train_cmd->parsed()) return cmd_train(config_path);
        if (eval_cmd->parsed()) return cmd_eval(ckpt_path, config_path);
        if (grid_cmd->parsed()) return cmd_grid(config_path, axis, values, seeds);
        if (gc_cmd->parsed()) return cmd_gradcheck(gc_seeds, gc_tol);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
