#include "tokenseg/experiment.hpp"

#include <atomic>
#include <cerrno>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <thread>

namespace tokenseg {

namespace fs = std::filesystem;

namespace {

std::string fmt_real(real v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", static_cast<double>(v));
    return buf;
}

void apply_axis(ExperimentConfig& cfg, const std::string& axis, const std::string& value) {
    if (axis == "augmentation") {
        mix_baseline(value);  // rejects unknown names
        cfg.aug.baseline = value;
    } else if (axis == "branch_design") {
        branch_design(value);
        cfg.train.branch = value;
    } else if (axis == "rho" || axis == "theta") {
        errno = 0;
        char* end = nullptr;
        const double v = std::strtod(value.c_str(), &end);
        if (value.empty() || errno != 0 || end != value.c_str() + value.size()) {
            throw std::invalid_argument("grid axis " + axis + " needs numeric values (got '" +
                                        value + "')");
        }
        if (axis == "rho") cfg.train.rho = static_cast<real>(v);
        else cfg.train.theta = static_cast<real>(v);
    } else {
        throw std::invalid_argument(
            "grid axis must be one of augmentation|branch_design|rho|theta (got '" + axis + "')");
    }
}

}  // namespace

RunRecord run_experiment(const ExperimentConfig& cfg) {
    cfg.validate();
    const auto t0 = std::chrono::steady_clock::now();

    Splits splits = make_splits(cfg.data, cfg.model.image_size, cfg.model.num_classes);
    Trainer trainer(cfg.model, cfg.train, cfg.aug, splits.labeled, splits.unlabeled);

    fs::create_directories(cfg.output_dir);
    const fs::path dir(cfg.output_dir);
    {
        std::ofstream os(dir / "config.txt");
        if (!os) throw std::runtime_error("cannot write " + (dir / "config.txt").string());
        os << serialize_config(cfg);
    }
    std::ofstream metrics_os(dir / "metrics.txt");
    std::ofstream eval_os(dir / "eval.txt");
    if (!metrics_os || !eval_os) {
        throw std::runtime_error("cannot open output files under " + cfg.output_dir);
    }

    RunRecord rec;
    rec.config = cfg;
    size_t flushed = 0;
    auto flush_metrics = [&] {
        const auto& h = trainer.history();
        for (; flushed < h.size(); ++flushed) metrics_os << metrics_line(h[flushed]) << '\n';
        metrics_os.flush();
    };

    for (int epoch = 1; epoch <= cfg.train.epochs; ++epoch) {
        try {
            trainer.run_epoch();
        } catch (...) {
            flush_metrics();  // keep the partial trace for post-mortems
            throw;
        }
        flush_metrics();
        const IouReport r = evaluate_model(trainer.student(), splits.val);
        rec.epoch_val.emplace_back(epoch, r.miou);
        rec.final_val = r;
        eval_os << "epoch=" << epoch << " val_miou=" << fmt_real(r.miou) << '\n';
    }

    {
        std::ofstream os(dir / "report.txt");
        os << "final_miou=" << fmt_real(rec.final_val.miou) << '\n';
        for (size_t c = 0; c < rec.final_val.per_class.size(); ++c) {
            os << "class_" << c << "_iou=" << fmt_real(rec.final_val.per_class[c]) << '\n';
        }
    }
    save_checkpoint((dir / "student.ckpt").string(), trainer.student());
    if (!cfg.train.sup_only) save_checkpoint((dir / "teacher.ckpt").string(), trainer.teacher());

    rec.metrics = trainer.history();
    rec.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return rec;
}

GridResult run_ablation_grid(const ExperimentConfig& base, const std::string& axis,
                             const std::vector<std::string>& values,
                             const std::vector<uint64_t>& seeds, int threads) {
    if (values.empty()) throw std::invalid_argument("grid needs at least one value");
    if (seeds.empty()) throw std::invalid_argument("grid needs at least one seed");
    if (threads < 1) throw std::invalid_argument("grid needs threads >= 1");

    GridResult res;
    res.axis = axis;
    res.values = values;
    res.seeds = seeds;
    res.cells.resize(values.size() * seeds.size());
    std::vector<ExperimentConfig> configs(res.cells.size());

    for (size_t vi = 0; vi < values.size(); ++vi) {
        for (size_t si = 0; si < seeds.size(); ++si) {
            const size_t k = vi * seeds.size() + si;
            GridCell& cell = res.cells[k];
            cell.value = values[vi];
            cell.seed = seeds[si];
            ExperimentConfig cfg = base;
            apply_axis(cfg, axis, values[vi]);  // usage errors surface before any run
            cfg.train.seed = seeds[si];
            cfg.data.seed = seeds[si];
            cfg.output_dir = base.output_dir + "/" + axis + "/" + values[vi] + "/seed" +
                             std::to_string(seeds[si]);
            cfg.validate();
            configs[k] = std::move(cfg);
        }
    }

    std::atomic<size_t> next{0};
    auto worker = [&] {
        for (;;) {
            const size_t k = next.fetch_add(1);
            if (k >= res.cells.size()) return;
            GridCell& cell = res.cells[k];
            try {
                const RunRecord rec = run_experiment(configs[k]);
                cell.final_miou = rec.final_val.miou;
                cell.ok = true;
            } catch (const std::exception& e) {
                cell.ok = false;
                cell.error = e.what();
            }
        }
    };
    const int n_workers = static_cast<int>(
        std::min<size_t>(static_cast<size_t>(threads), res.cells.size()));
    if (n_workers <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        pool.reserve(static_cast<size_t>(n_workers));
        for (int t = 0; t < n_workers; ++t) pool.emplace_back(worker);
        for (std::thread& t : pool) t.join();
    }

    std::ostringstream table;
    for (size_t vi = 0; vi < values.size(); ++vi) {
        double total = 0, total_sq = 0;
        int n = 0, failed = 0;
        for (size_t si = 0; si < seeds.size(); ++si) {
            const GridCell& cell = res.cells[vi * seeds.size() + si];
            if (!cell.ok) {
                ++failed;
                continue;
            }
            total += static_cast<double>(cell.final_miou);
            total_sq += static_cast<double>(cell.final_miou) * cell.final_miou;
            ++n;
        }
        const double mean = n > 0 ? total / n : 0;
        const double var = n > 1 ? std::max(0.0, (total_sq - n * mean * mean) / (n - 1)) : 0;
        char buf[160];
        std::snprintf(buf, sizeof(buf), "%s=%s n=%d mean_miou=%.4f std=%.4f failed=%d",
                      axis.c_str(), values[vi].c_str(), n, mean, std::sqrt(var), failed);
        table << buf << '\n';
    }
    res.table = table.str();

    const fs::path summary_dir = fs::path(base.output_dir) / axis;
    fs::create_directories(summary_dir);
    std::ofstream os(summary_dir / "summary.txt");
    os << res.table;
    return res;
}

int grid_threads_from_env() {
    const char* s = std::getenv("TOKENSEG_THREADS");
    if (s == nullptr || *s == '\0') return 1;
    errno = 0;
    char* end = nullptr;
    const long v = std::strtol(s, &end, 10);
    if (errno != 0 || *end != '\0' || v < 1 || v > 1024) {
        throw std::invalid_argument("TOKENSEG_THREADS must be a positive integer (got '" +
                                 std::string(s) + "')");
    }
    return static_cast<int>(v);
}

}  // namespace tokenseg
