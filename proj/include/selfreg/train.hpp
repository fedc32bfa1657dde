#ifndef SELFREG_TRAIN_HPP
#define SELFREG_TRAIN_HPP

#include <algorithm>
#include <atomic>
#include <cmath>
#include <mutex>
#include <cstdlib>
#include <fstream>
#include <map>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "selfreg/data.hpp"
#include "selfreg/losses.hpp"
#include "selfreg/metrics.hpp"
#include "selfreg/rng.hpp"
#include "selfreg/unet.hpp"

namespace selfreg {

// ---------------------------------------------------------------------------
// configuration
// ---------------------------------------------------------------------------

struct TrainConfig {
    UNetConfig unet;
    SCRConfig scr;
    IFDConfig ifd;
    int epochs = 10;
    int batch_size = 4;
    double learning_rate = 0.05;
    double momentum = 0.9;
    double weight_decay = 1e-5;
    std::uint64_t seed = 0;
    int eval_every = 1;

    void validate() const {
        unet.validate();
        scr.validate();
        ifd.validate();
        if (epochs < 1) throw ConfigError("epochs must be >= 1");
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (learning_rate <= 0.0) throw ConfigError("learning_rate must be > 0");
        if (momentum < 0.0 || momentum >= 1.0)
            throw ConfigError("momentum must be in [0, 1)");
        if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
        if (eval_every < 1) throw ConfigError("eval_every must be >= 1");
    }
};

inline void to_json(nlohmann::ordered_json& j, const TrainConfig& c) {
    nlohmann::ordered_json u;
    to_json(u, c.unet);
    j = nlohmann::ordered_json{
        {"unet", u},
        {"scr", {{"lambda1", c.scr.lambda1},
                 {"rng_seed", c.scr.rng_seed},
                 {"resample_each_step", c.scr.resample_each_step}}},
        {"ifd", {{"lambda2", c.ifd.lambda2}, {"p", c.ifd.p}}},
        {"epochs", c.epochs},
        {"batch_size", c.batch_size},
        {"learning_rate", c.learning_rate},
        {"momentum", c.momentum},
        {"weight_decay", c.weight_decay},
        {"seed", c.seed},
        {"eval_every", c.eval_every}};
}

inline void from_json(const nlohmann::ordered_json& j, TrainConfig& c) {
    if (j.contains("unet")) from_json(j.at("unet"), c.unet);
    if (j.contains("scr")) {
        const auto& s = j.at("scr");
        c.scr.lambda1 = s.value("lambda1", c.scr.lambda1);
        c.scr.rng_seed = s.value("rng_seed", c.scr.rng_seed);
        c.scr.resample_each_step = s.value("resample_each_step", c.scr.resample_each_step);
    }
    if (j.contains("ifd")) {
        const auto& s = j.at("ifd");
        c.ifd.lambda2 = s.value("lambda2", c.ifd.lambda2);
        c.ifd.p = s.value("p", c.ifd.p);
    }
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.momentum = j.value("momentum", c.momentum);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.seed = j.value("seed", c.seed);
    c.eval_every = j.value("eval_every", c.eval_every);
}

// ---------------------------------------------------------------------------
// run report
// ---------------------------------------------------------------------------

struct RunReport {
    TrainConfig config;
    std::vector<LossBreakdown> trace;    // per-epoch mean loss components
    std::vector<MetricSet> fold_metrics; // single-run: one entry (best validation)
    double mean_dsc = 0.0, std_dsc = 0.0;
    double mean_iou = 0.0, std_iou = 0.0;
    double wall_clock_seconds = 0.0;  // informational; never persisted
    std::uint64_t seed = 0;

    // population mean/std over fold entries
    void recompute_aggregates() {
        double n = double(fold_metrics.size());
        mean_dsc = std_dsc = mean_iou = std_iou = 0.0;
        if (fold_metrics.empty()) return;
        for (const auto& m : fold_metrics) {
            mean_dsc += m.mean_dsc;
            mean_iou += m.mean_iou;
        }
        mean_dsc /= n;
        mean_iou /= n;
        for (const auto& m : fold_metrics) {
            std_dsc += (m.mean_dsc - mean_dsc) * (m.mean_dsc - mean_dsc);
            std_iou += (m.mean_iou - mean_iou) * (m.mean_iou - mean_iou);
        }
        std_dsc = std::sqrt(std_dsc / n);
        std_iou = std::sqrt(std_iou / n);
    }
};

// wall clock is deliberately excluded so repeated runs serialize identically
inline nlohmann::ordered_json report_to_json(const RunReport& r) {
    nlohmann::ordered_json cfg;
    to_json(cfg, r.config);
    nlohmann::ordered_json trace = nlohmann::ordered_json::array();
    for (const auto& e : r.trace)
        trace.push_back({{"l_cd", e.l_cd}, {"l_scr", e.l_scr}, {"l_ifd", e.l_ifd},
                         {"total", e.total}});
    nlohmann::ordered_json folds = nlohmann::ordered_json::array();
    for (const auto& m : r.fold_metrics)
        folds.push_back({{"dsc_per_class", m.dsc_per_class},
                         {"iou_per_class", m.iou_per_class},
                         {"mean_dsc", m.mean_dsc},
                         {"mean_iou", m.mean_iou}});
    return nlohmann::ordered_json{{"format", "selfreg-report/1"},
                                  {"config", cfg},
                                  {"seed", r.seed},
                                  {"trace", trace},
                                  {"fold_metrics", folds},
                                  {"aggregate",
                                   {{"mean_dsc", r.mean_dsc},
                                    {"std_dsc", r.std_dsc},
                                    {"mean_iou", r.mean_iou},
                                    {"std_iou", r.std_iou}}}};
}

inline RunReport report_from_json(const nlohmann::ordered_json& j) {
    if (j.value("format", "") != "selfreg-report/1")
        throw IOError("not a selfreg-report/1 document");
    RunReport r;
    from_json(j.at("config"), r.config);
    r.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& e : j.at("trace"))
        r.trace.push_back({e.at("l_cd"), e.at("l_scr"), e.at("l_ifd"), e.at("total")});
    for (const auto& f : j.at("fold_metrics")) {
        MetricSet m;
        m.dsc_per_class = f.at("dsc_per_class").get<std::vector<double>>();
        m.iou_per_class = f.at("iou_per_class").get<std::vector<double>>();
        m.mean_dsc = f.at("mean_dsc");
        m.mean_iou = f.at("mean_iou");
        r.fold_metrics.push_back(std::move(m));
    }
    const auto& a = j.at("aggregate");
    r.mean_dsc = a.at("mean_dsc");
    r.std_dsc = a.at("std_dsc");
    r.mean_iou = a.at("mean_iou");
    r.std_iou = a.at("std_iou");
    return r;
}

inline void write_report(const RunReport& r, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw IOError("cannot write report: " + path);
    f << report_to_json(r).dump(2) << "\n";
}

inline void write_loss_trace_csv(const RunReport& r, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw IOError("cannot write csv: " + path);
    f << "epoch,l_cd,l_scr,l_ifd,total\n";
    char buf[160];
    for (std::size_t i = 0; i < r.trace.size(); ++i) {
        const auto& e = r.trace[i];
        std::snprintf(buf, sizeof(buf), "%zu,%.12g,%.12g,%.12g,%.12g\n", i + 1, e.l_cd,
                      e.l_scr, e.l_ifd, e.total);
        f << buf;
    }
}

// ---------------------------------------------------------------------------
// training loop (momentum SGD + weight decay, Eq. 3 objective)
// ---------------------------------------------------------------------------

namespace detail {

inline void make_batch(const std::vector<SegSample>& set, const std::vector<int>& order,
                       std::size_t first, std::size_t count, Tensor& images,
                       IntTensor& labels) {
    const SegSample& s0 = set[std::size_t(order[first])];
    int C = s0.image.dim(0), H = s0.image.dim(1), W = s0.image.dim(2);
    images = Tensor({int(count), C, H, W});
    labels = IntTensor({int(count), H, W});
    std::size_t per = std::size_t(C) * H * W, hw = std::size_t(H) * W;
    for (std::size_t b = 0; b < count; ++b) {
        const SegSample& s = set[std::size_t(order[first + b])];
        if (s.image.dim(0) != C || s.image.dim(1) != H || s.image.dim(2) != W)
            throw ShapeError("train: inconsistent sample shapes in dataset");
        std::copy(s.image.data(), s.image.data() + per, images.data() + b * per);
        std::copy(s.mask.data(), s.mask.data() + hw, labels.data() + b * hw);
    }
}

}  // namespace detail

struct TrainResult {
    UNetModel model;  // parameters hold the best-validation checkpoint
    RunReport report;
};

inline TrainResult train(UNetModel model, const std::vector<SegSample>& train_set,
                         const std::vector<SegSample>& val_set, const TrainConfig& cfg) {
    cfg.validate();
    if (train_set.empty() || val_set.empty())
        throw ValueError("train: train and validation sets must be nonempty");

    RunReport report;
    report.config = cfg;
    report.seed = cfg.seed;

    std::uint64_t scr_seed =
        cfg.scr.rng_seed != 0 ? cfg.scr.rng_seed : derive_seed(cfg.seed, "scr-rcs");
    Rng scr_rng(scr_seed);

    std::map<std::string, Tensor> velocity;
    for (const auto& name : model.param_names())
        velocity.emplace(name, Tensor(model.param_value(name).shape()));

    std::map<std::string, Tensor> best_params = model.snapshot();
    double best_dsc = -1.0;
    long step = 0;

    int n = int(train_set.size());
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng shuffle_rng(derive_seed(cfg.seed, "shuffle-epoch-" + std::to_string(epoch)));
        std::vector<int> order = shuffle_rng.permutation(n);

        LossBreakdown epoch_mean;
        int batches = 0;
        for (std::size_t first = 0; first < std::size_t(n); first += std::size_t(cfg.batch_size)) {
            std::size_t count = std::min(std::size_t(cfg.batch_size), std::size_t(n) - first);
            Tensor images;
            IntTensor labels;
            detail::make_batch(train_set, order, first, count, images, labels);

            if (!cfg.scr.resample_each_step) scr_rng = Rng(scr_seed);
            ForwardResult fwd = model.forward(images);
            TotalLoss loss = total_loss(fwd.logits, labels, fwd.taps, cfg.scr, cfg.ifd,
                                        scr_rng);
            if (!std::isfinite(loss.breakdown.total))
                throw DivergenceError("non-finite total loss at step " +
                                      std::to_string(step));
            ad::backward(loss.value);

            for (const auto& name : model.param_names()) {
                ad::Var p = model.param(name);
                Tensor& v = velocity.at(name);
                for (std::size_t i = 0; i < p->value.numel(); ++i) {
                    double g = (p->grad_ready ? p->grad[i] : 0.0) +
                               cfg.weight_decay * p->value[i];
                    v[i] = cfg.momentum * v[i] - cfg.learning_rate * g;
                    p->value[i] += v[i];
                }
            }

            epoch_mean.l_cd += loss.breakdown.l_cd;
            epoch_mean.l_scr += loss.breakdown.l_scr;
            epoch_mean.l_ifd += loss.breakdown.l_ifd;
            epoch_mean.total += loss.breakdown.total;
            ++batches;
            ++step;
        }
        epoch_mean.l_cd /= batches;
        epoch_mean.l_scr /= batches;
        epoch_mean.l_ifd /= batches;
        epoch_mean.total /= batches;
        report.trace.push_back(epoch_mean);

        if ((epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs) {
            MetricSet m = evaluate(model, val_set);
            if (m.mean_dsc > best_dsc) {
                best_dsc = m.mean_dsc;
                best_params = model.snapshot();
            }
        }
    }

    model.restore(best_params);
    report.fold_metrics.push_back(evaluate(model, val_set));
    report.recompute_aggregates();
    return {std::move(model), std::move(report)};
}

// ---------------------------------------------------------------------------
// repeated k-fold cross-validation
// ---------------------------------------------------------------------------

inline int num_workers_from_env() {
    const char* env = std::getenv("SELFREG_NUM_WORKERS");
    if (!env) return 1;
    int n = std::atoi(env);
    return n < 1 ? 1 : n;
}

// Trains one model per (repeat, fold) pair; folds run as independent jobs
// with disjoint derived seeds and are merged in fold order regardless of
// worker scheduling.
inline RunReport run_crossval(const std::vector<SegSample>& dataset, const FoldSpec& folds,
                              const TrainConfig& cfg) {
    cfg.validate();
    if (int(folds.assignments.size()) != folds.repeats)
        throw ValueError("run_crossval: fold spec repeats/assignments mismatch");

    struct Job {
        int repeat, fold;
    };
    std::vector<Job> jobs;
    for (int r = 0; r < folds.repeats; ++r)
        for (int f = 0; f < folds.k; ++f) jobs.push_back({r, f});

    std::vector<MetricSet> results(jobs.size());
    std::vector<RunReport> fold_reports(jobs.size());
    std::atomic<std::size_t> next{0};
    std::exception_ptr first_error = nullptr;
    std::mutex err_mu;

    auto worker = [&]() {
        for (;;) {
            std::size_t j = next.fetch_add(1);
            if (j >= jobs.size()) return;
            try {
                const Job& job = jobs[j];
                const std::vector<int>& assign =
                    folds.assignments[std::size_t(job.repeat)];
                std::vector<SegSample> tr, va;
                for (std::size_t i = 0; i < dataset.size(); ++i)
                    (assign[i] == job.fold ? va : tr).push_back(dataset[i]);
                TrainConfig jc = cfg;
                jc.seed = derive_seed(cfg.seed, "crossval-r" + std::to_string(job.repeat) +
                                                    "-f" + std::to_string(job.fold));
                jc.unet.seed = derive_seed(jc.seed, "model-init");
                TrainResult res = train(build_unet(jc.unet), tr, va, jc);
                results[j] = res.report.fold_metrics.at(0);
                fold_reports[j] = std::move(res.report);
            } catch (...) {
                std::lock_guard<std::mutex> lk(err_mu);
                if (!first_error) first_error = std::current_exception();
                return;
            }
        }
    };

    int workers = std::min<int>(num_workers_from_env(), int(jobs.size()));
    if (workers <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int i = 0; i < workers; ++i) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    if (first_error) std::rethrow_exception(first_error);

    RunReport report;
    report.config = cfg;
    report.seed = cfg.seed;
    report.trace = fold_reports.front().trace;  // representative trace (first fold)
    report.fold_metrics = std::move(results);
    report.recompute_aggregates();
    return report;
}

// ---------------------------------------------------------------------------
// lambda / loss-flag ablation grid
// ---------------------------------------------------------------------------

struct AblationCell {
    double lambda1 = 0.015;
    double lambda2 = 0.015;
    bool use_scr = true;
    bool use_ifd = true;
};

struct AblationRow {
    AblationCell cell;
    double mean_dsc = 0.0, std_dsc = 0.0;
    double mean_iou = 0.0, std_iou = 0.0;
};

// 4x4 lambda sweep with both losses active, plus the four loss-flag rows
inline std::vector<AblationCell> default_ablation_grid() {
    const double lambdas[4] = {0.0, 0.005, 0.015, 0.045};
    std::vector<AblationCell> grid;
    for (double l1 : lambdas)
        for (double l2 : lambdas) grid.push_back({l1, l2, true, true});
    grid.push_back({0.015, 0.015, false, false});
    grid.push_back({0.015, 0.015, true, false});
    grid.push_back({0.015, 0.015, false, true});
    grid.push_back({0.015, 0.015, true, true});
    return grid;
}

// One cross-validation run per grid cell. Seeds depend only on the base
// config, so duplicated cells produce identical rows.
inline std::vector<AblationRow> run_ablation(const std::vector<SegSample>& dataset,
                                             const FoldSpec& folds,
                                             const std::vector<AblationCell>& grid,
                                             const TrainConfig& cfg) {
    if (grid.empty()) throw ValueError("run_ablation: empty grid");
    std::vector<AblationRow> rows;
    for (const AblationCell& cell : grid) {
        TrainConfig cc = cfg;
        cc.scr.lambda1 = cell.use_scr ? cell.lambda1 : 0.0;
        cc.ifd.lambda2 = cell.use_ifd ? cell.lambda2 : 0.0;
        RunReport rep = run_crossval(dataset, folds, cc);
        rows.push_back({cell, rep.mean_dsc, rep.std_dsc, rep.mean_iou, rep.std_iou});
    }
    return rows;
}

inline void write_ablation_csv(const std::vector<AblationRow>& rows,
                               const std::string& path) {
    std::ofstream f(path);
    if (!f) throw IOError("cannot write csv: " + path);
    f << "lambda1,lambda2,use_scr,use_ifd,mean_dsc,std_dsc,mean_iou,std_iou\n";
    char buf[256];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof(buf), "%.12g,%.12g,%d,%d,%.12g,%.12g,%.12g,%.12g\n",
                      r.cell.lambda1, r.cell.lambda2, int(r.cell.use_scr),
                      int(r.cell.use_ifd), r.mean_dsc, r.std_dsc, r.mean_iou, r.std_iou);
        f << buf;
    }
}

}  // namespace selfreg

#endif
