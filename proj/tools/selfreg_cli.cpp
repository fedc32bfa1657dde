// selfreg: segmentation experiment runner
//
// Subcommands: train, eval, diagnose, ablate, synth. All randomness flows
// from one top-level seed, fanned out into purpose-tagged child seeds, so any
// command repeated with the same config and seed writes byte-identical files.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <string>
#include <vector>

#include "selfreg/data.hpp"
#include "selfreg/diagnostics.hpp"
#include "selfreg/errors.hpp"
#include "selfreg/losses.hpp"
#include "selfreg/metrics.hpp"
#include "selfreg/rng.hpp"
#include "selfreg/train.hpp"
#include "selfreg/unet.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;
using namespace selfreg;

namespace {

// ---------------------------------------------------------------------------
// configuration document
// ---------------------------------------------------------------------------

struct DataSpec {
    std::string source = "synthetic";  // "synthetic" | "directory"
    int n = 40;                        // dataset size for synth/ablate
    int n_train = 32;
    int n_val = 8;
    int height = 64;
    int width = 64;
    int classes = 2;
    double difficulty = 0.3;
    std::string images_dir;
    std::string masks_dir;

    void validate() const {
        if (source != "synthetic" && source != "directory")
            throw ConfigError("data.source must be 'synthetic' or 'directory'");
        if (n < 1) throw ConfigError("data.n must be >= 1");
        if (n_train < 1) throw ConfigError("data.n_train must be >= 1");
        if (n_val < 1) throw ConfigError("data.n_val must be >= 1");
        if (classes < 2) throw ConfigError("data.classes must be >= 2");
        if (difficulty < 0.0 || difficulty > 1.0)
            throw ConfigError("data.difficulty must be in [0,1]");
        if (source == "directory" && (images_dir.empty() || masks_dir.empty()))
            throw ConfigError("data.images_dir and data.masks_dir are required "
                              "for data.source=directory");
    }
};

struct FoldsSpec {
    int k = 5;
    int repeats = 3;

    void validate() const {
        if (k < 2) throw ConfigError("folds.k must be >= 2");
        if (repeats < 1) throw ConfigError("folds.repeats must be >= 1");
    }
};

struct AppConfig {
    TrainConfig train;
    DataSpec data;
    FoldsSpec folds;
};

ordered_json app_config_to_json(const AppConfig& c) {
    ordered_json t;
    to_json(t, c.train);
    return ordered_json{{"train", t},
                        {"data",
                         {{"source", c.data.source},
                          {"n", c.data.n},
                          {"n_train", c.data.n_train},
                          {"n_val", c.data.n_val},
                          {"height", c.data.height},
                          {"width", c.data.width},
                          {"classes", c.data.classes},
                          {"difficulty", c.data.difficulty},
                          {"images_dir", c.data.images_dir},
                          {"masks_dir", c.data.masks_dir}}},
                        {"folds", {{"k", c.folds.k}, {"repeats", c.folds.repeats}}}};
}

AppConfig app_config_from_json(const ordered_json& j) {
    AppConfig c;
    if (j.contains("train")) from_json(j.at("train"), c.train);
    if (j.contains("data")) {
        const auto& d = j.at("data");
        c.data.source = d.value("source", c.data.source);
        c.data.n = d.value("n", c.data.n);
        c.data.n_train = d.value("n_train", c.data.n_train);
        c.data.n_val = d.value("n_val", c.data.n_val);
        c.data.height = d.value("height", c.data.height);
        c.data.width = d.value("width", c.data.width);
        c.data.classes = d.value("classes", c.data.classes);
        c.data.difficulty = d.value("difficulty", c.data.difficulty);
        c.data.images_dir = d.value("images_dir", c.data.images_dir);
        c.data.masks_dir = d.value("masks_dir", c.data.masks_dir);
    }
    if (j.contains("folds")) {
        const auto& f = j.at("folds");
        c.folds.k = f.value("k", c.folds.k);
        c.folds.repeats = f.value("repeats", c.folds.repeats);
    }
    return c;
}

const std::set<std::string>& known_override_keys() {
    static const std::set<std::string> keys = {
        "epochs", "batch_size", "learning_rate", "momentum", "weight_decay", "seed",
        "eval_every",
        "unet.backbone", "unet.in_channels", "unet.num_classes", "unet.base_channels",
        "unet.depth", "unet.input_h", "unet.input_w", "unet.window_size", "unet.seed",
        "scr.lambda1", "scr.rng_seed", "scr.resample_each_step",
        "ifd.lambda2", "ifd.p",
        "data.source", "data.n", "data.n_train", "data.n_val", "data.height",
        "data.width", "data.classes", "data.difficulty", "data.images_dir",
        "data.masks_dir",
        "folds.k", "folds.repeats"};
    return keys;
}

// dotted KEY=VALUE override; unprefixed keys address the training config
void apply_override(ordered_json& doc, const std::string& spec) {
    auto eq = spec.find('=');
    if (eq == std::string::npos)
        throw ConfigError("override '" + spec + "' is not of the form KEY=VALUE");
    std::string key = spec.substr(0, eq);
    std::string value = spec.substr(eq + 1);
    if (!known_override_keys().count(key))
        throw ConfigError("unknown config key: " + key);

    ordered_json parsed;
    try {
        parsed = ordered_json::parse(value);
        if (!parsed.is_number() && !parsed.is_boolean() && !parsed.is_string())
            parsed = value;
    } catch (const ordered_json::parse_error&) {
        parsed = value;  // bare strings (e.g. backbone names, paths)
    }

    std::vector<std::string> parts;
    std::size_t start = 0;
    for (std::size_t dot = key.find('.'); dot != std::string::npos;
         start = dot + 1, dot = key.find('.', start))
        parts.push_back(key.substr(start, dot - start));
    parts.push_back(key.substr(start));
    if (parts.front() != "data" && parts.front() != "folds")
        parts.insert(parts.begin(), "train");

    ordered_json* node = &doc;
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) node = &(*node)[parts[i]];
    (*node)[parts.back()] = parsed;
}

struct CommonArgs {
    std::string config_path;
    std::vector<std::string> overrides;
    std::string out_dir = "out";
    std::uint64_t seed = 0;
    bool seed_given = false;
};

AppConfig resolve_config(const CommonArgs& args) {
    ordered_json doc = ordered_json::object();
    if (!args.config_path.empty()) {
        std::ifstream f(args.config_path);
        if (!f) throw ConfigError("cannot open config file: " + args.config_path);
        try {
            doc = ordered_json::parse(f);
        } catch (const ordered_json::parse_error& e) {
            throw ConfigError("config file is not valid JSON: " + std::string(e.what()));
        }
    }
    for (const auto& o : args.overrides) apply_override(doc, o);
    AppConfig cfg = app_config_from_json(doc);
    if (args.seed_given) cfg.train.seed = args.seed;
    if (cfg.train.unet.seed == 0)
        cfg.train.unet.seed = derive_seed(cfg.train.seed, "model-init");
    cfg.data.validate();
    cfg.folds.validate();
    cfg.train.validate();
    return cfg;
}

void write_config_echo(const AppConfig& cfg, const std::string& out_dir) {
    fs::create_directories(out_dir);
    std::ofstream f(out_dir + "/config.json");
    if (!f) throw IOError("cannot write config echo in " + out_dir);
    f << app_config_to_json(cfg).dump(2) << "\n";
}

std::vector<SegSample> synth_set(const AppConfig& cfg, int n, const std::string& tag) {
    return generate_synthetic(n, cfg.data.height, cfg.data.width, cfg.data.classes,
                              cfg.data.difficulty, derive_seed(cfg.train.seed, tag));
}

std::vector<SegSample> directory_set(const AppConfig& cfg) {
    return load_directory_dataset(cfg.data.images_dir, cfg.data.masks_dir,
                                  cfg.data.classes, cfg.data.height, cfg.data.width,
                                  cfg.train.unet.in_channels);
}

// train/val split shared by the train and eval commands
void make_train_val(const AppConfig& cfg, std::vector<SegSample>& tr,
                    std::vector<SegSample>& va) {
    if (cfg.data.source == "synthetic") {
        tr = synth_set(cfg, cfg.data.n_train, "train-data");
        va = synth_set(cfg, cfg.data.n_val, "val-data");
    } else {
        std::vector<SegSample> all = directory_set(cfg);
        if (all.size() < 2) throw ValueError("directory dataset needs >= 2 samples");
        for (std::size_t i = 0; i < all.size(); ++i)
            (i % 5 == 4 ? va : tr).push_back(all[i]);  // every 5th sample validates
        if (va.empty()) va.push_back(tr.back()), tr.pop_back();
    }
}

std::vector<SegSample> full_set(const AppConfig& cfg) {
    return cfg.data.source == "synthetic" ? synth_set(cfg, cfg.data.n, "crossval-data")
                                          : directory_set(cfg);
}

// ---------------------------------------------------------------------------
// commands
// ---------------------------------------------------------------------------

int cmd_train(const CommonArgs& args) {
    AppConfig cfg = resolve_config(args);
    write_config_echo(cfg, args.out_dir);
    std::vector<SegSample> tr, va;
    make_train_val(cfg, tr, va);
    TrainResult res = train(build_unet(cfg.train.unet), tr, va, cfg.train);
    save_checkpoint(res.model, args.out_dir + "/checkpoint.bin");
    write_report(res.report, args.out_dir + "/report.json");
    write_loss_trace_csv(res.report, args.out_dir + "/trace.csv");
    std::printf("train: %d epochs, val mean_dsc=%.6f mean_iou=%.6f\n",
                cfg.train.epochs, res.report.mean_dsc, res.report.mean_iou);
    return 0;
}

int cmd_eval(const CommonArgs& args, const std::string& ckpt) {
    AppConfig cfg = resolve_config(args);
    write_config_echo(cfg, args.out_dir);
    UNetModel model = load_checkpoint(ckpt);
    std::vector<SegSample> tr, va;
    make_train_val(cfg, tr, va);
    MetricSet m = evaluate(model, va);
    ordered_json j{{"dsc_per_class", m.dsc_per_class},
                   {"iou_per_class", m.iou_per_class},
                   {"mean_dsc", m.mean_dsc},
                   {"mean_iou", m.mean_iou}};
    std::ofstream f(args.out_dir + "/metrics.json");
    if (!f) throw IOError("cannot write metrics in " + args.out_dir);
    f << j.dump(2) << "\n";
    std::printf("eval: mean_dsc=%.6f mean_iou=%.6f over %zu samples\n", m.mean_dsc,
                m.mean_iou, va.size());
    return 0;
}

int cmd_diagnose(const CommonArgs& args, const std::string& ckpt, int target_class) {
    AppConfig cfg = resolve_config(args);
    UNetModel model = load_checkpoint(ckpt);
    if (target_class < 0 || target_class >= model.config.num_classes)
        throw ConfigError("target class out of range for checkpoint");
    write_config_echo(cfg, args.out_dir);
    // diagnostics run on a small validation batch at the model's resolution
    AppConfig dc = cfg;
    dc.data.height = model.config.input_h;
    dc.data.width = model.config.input_w;
    dc.data.classes = model.config.num_classes;
    std::vector<SegSample> tr, va;
    make_train_val(dc, tr, va);
    std::vector<Tensor> images;
    for (std::size_t i = 0; i < va.size() && i < 4; ++i) images.push_back(va[i].image);
    diagnose_model(model, images, target_class, args.out_dir);
    std::printf("diagnose: wrote attention maps and similarity matrices to %s\n",
                args.out_dir.c_str());
    return 0;
}

int cmd_ablate(const CommonArgs& args) {
    AppConfig cfg = resolve_config(args);
    write_config_echo(cfg, args.out_dir);
    std::vector<SegSample> data = full_set(cfg);
    FoldSpec folds = make_folds(int(data.size()), cfg.folds.k, cfg.folds.repeats,
                                derive_seed(cfg.train.seed, "folds"));
    std::vector<AblationRow> rows =
        run_ablation(data, folds, default_ablation_grid(), cfg.train);
    write_ablation_csv(rows, args.out_dir + "/ablation.csv");
    std::printf("ablate: %zu rows written to %s/ablation.csv\n", rows.size(),
                args.out_dir.c_str());
    return 0;
}

int cmd_synth(const CommonArgs& args) {
    AppConfig cfg = resolve_config(args);
    write_config_echo(cfg, args.out_dir);
    std::vector<SegSample> samples = synth_set(cfg, cfg.data.n, "synth-data");
    export_dataset(samples, args.out_dir + "/images", args.out_dir + "/masks",
                   cfg.data.classes);
    std::printf("synth: wrote %zu image/mask pairs under %s\n", samples.size(),
                args.out_dir.c_str());
    return 0;
}

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config_path, "JSON config file");
    cmd->add_option("--set", args.overrides,
                    "dotted KEY=VALUE config override (repeatable)");
    cmd->add_option("--out", args.out_dir, "output directory");
    cmd->add_option("--seed", args.seed, "top-level random seed")
        ->each([&args](const std::string&) { args.seed_given = true; });
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"selfreg: UNet segmentation with self-regularization losses"};
    app.require_subcommand(1);

    CommonArgs args;
    std::string ckpt = "checkpoint.bin";
    int target_class = 1;

    CLI::App* c_train = app.add_subcommand("train", "train a model and write a report");
    add_common(c_train, args);
    CLI::App* c_eval = app.add_subcommand("eval", "evaluate a checkpoint");
    add_common(c_eval, args);
    c_eval->add_option("--ckpt", ckpt, "checkpoint path");
    CLI::App* c_diag = app.add_subcommand("diagnose",
                                          "attention maps + channel-similarity analysis");
    add_common(c_diag, args);
    c_diag->add_option("--ckpt", ckpt, "checkpoint path");
    c_diag->add_option("--target-class", target_class, "class for attention maps");
    CLI::App* c_abl = app.add_subcommand("ablate", "lambda/loss-flag ablation grid");
    add_common(c_abl, args);
    CLI::App* c_synth = app.add_subcommand("synth", "generate a synthetic dataset");
    add_common(c_synth, args);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (c_train->parsed()) return cmd_train(args);
        if (c_eval->parsed()) return cmd_eval(args, ckpt);
        if (c_diag->parsed()) return cmd_diagnose(args, ckpt, target_class);
        if (c_abl->parsed()) return cmd_ablate(args);
        if (c_synth->parsed()) return cmd_synth(args);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 2;
}
