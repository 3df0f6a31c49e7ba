// Command-line surface: synth | train | crossval | predict | quantify |
// evaluate | bench. Options resolve as defaults < config file < flags, and
// every run records the resolved configuration in run_meta.json.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "lungquant/bench/harness.hpp"
#include "lungquant/core/errors.hpp"
#include "lungquant/core/gemm.hpp"
#include "lungquant/evaluate.hpp"
#include "lungquant/net/dualnet.hpp"
#include "lungquant/preprocess.hpp"
#include "lungquant/quantify.hpp"
#include "lungquant/synthdata.hpp"
#include "lungquant/train/trainer.hpp"
#include "lungquant/volio.hpp"

#ifndef LUNGQUANT_GIT_REV
#define LUNGQUANT_GIT_REV "unknown"
#endif

namespace fs = std::filesystem;
using namespace lungquant;

namespace {

struct Options {
    std::uint64_t seed = 0;
    std::string device = "accelerated";  // accelerated = BLAS gemm, portable = reference kernel
    std::string out = "out";
    std::string out_file;
    std::string manifest;
    std::string weights;
    std::string volume;
    std::string mask;
    std::string lung_mask;
    std::string pred_dir;
    std::string gt_dir;

    // synth
    std::size_t n = 10;
    std::size_t grid_slices = 16, grid_rows = 64, grid_cols = 64;

    // preprocessing geometry
    std::size_t target_size = 64;

    // network
    std::size_t window_len = 11;
    std::size_t dense_layers = 4, dense_growth = 16;
    std::size_t lstm_hidden = 32, head_channels = 64;

    // training
    double lr0 = 1e-3, momentum = 0.9, weight_decay = 1e-6;
    std::size_t batch_size = 32;
    double plateau_factor = 0.1;
    std::size_t plateau_patience = 10;
    double stop_lr = 1e-7;
    std::string loss = "rmi";  // rmi | ce_dice
    std::size_t max_epochs = 500;
    std::size_t folds = 5, val_size = 32, fold_index = 0;

    // bench
    std::vector<std::size_t> bench_slices = {16, 120};
    std::size_t reps = 5;
    std::size_t bench_side = 64;
    std::size_t unet2d_width = 24, unet3d_width = 14;
    std::size_t workers = 1;  // accepted for interface stability; single-process
};

// every settable key, shared between the config file and run_meta.json
template <class F>
void for_each_key(Options& o, F&& f) {
    f("seed", o.seed);
    f("n", o.n);
    f("grid_slices", o.grid_slices);
    f("grid_rows", o.grid_rows);
    f("grid_cols", o.grid_cols);
    f("target_size", o.target_size);
    f("window_len", o.window_len);
    f("dense_layers", o.dense_layers);
    f("dense_growth", o.dense_growth);
    f("lstm_hidden", o.lstm_hidden);
    f("head_channels", o.head_channels);
    f("lr0", o.lr0);
    f("momentum", o.momentum);
    f("weight_decay", o.weight_decay);
    f("batch_size", o.batch_size);
    f("plateau_factor", o.plateau_factor);
    f("plateau_patience", o.plateau_patience);
    f("stop_lr", o.stop_lr);
    f("loss", o.loss);
    f("max_epochs", o.max_epochs);
    f("folds", o.folds);
    f("val_size", o.val_size);
    f("fold_index", o.fold_index);
    f("reps", o.reps);
    f("bench_side", o.bench_side);
    f("unet2d_width", o.unet2d_width);
    f("unet3d_width", o.unet3d_width);
    f("workers", o.workers);
    f("device", o.device);
    f("out", o.out);
    f("manifest", o.manifest);
}

template <class T>
void assign_from_string(T& dst, const std::string& s, const std::string& key) {
    std::istringstream in(s);
    in >> dst;
    if (in.fail() || (in.peek(), !in.eof()))
        throw UsageError("bad value for config key " + key + ": " + s);
}

void assign_from_string(std::string& dst, const std::string& s, const std::string&) {
    dst = s;
}

void apply_config_file(Options& o, const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw UsageError("cannot read config file " + path.string());
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        const auto strip = [](std::string s) {
            const auto b = s.find_first_not_of(" \t\r");
            if (b == std::string::npos) return std::string();
            const auto e = s.find_last_not_of(" \t\r");
            return s.substr(b, e - b + 1);
        };
        line = strip(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw UsageError(path.string() + ":" + std::to_string(lineno) +
                             ": expected key=value");
        const std::string key = strip(line.substr(0, eq));
        const std::string value = strip(line.substr(eq + 1));
        bool known = false;
        for_each_key(o, [&](const char* k, auto& field) {
            if (key == k) {
                assign_from_string(field, value, key);
                known = true;
            }
        });
        if (!known) throw UsageError("unknown config key: " + key);
    }
}

net::NetworkConfig net_config(const Options& o) {
    net::NetworkConfig cfg;
    cfg.window_len = o.window_len;
    cfg.dense_layers = o.dense_layers;
    cfg.dense_growth = o.dense_growth;
    cfg.lstm_hidden = o.lstm_hidden;
    cfg.head_channels = o.head_channels;
    cfg.validate();
    return cfg;
}

train::TrainConfig train_config(const Options& o) {
    train::TrainConfig cfg;
    cfg.lr0 = o.lr0;
    cfg.momentum = o.momentum;
    cfg.weight_decay = o.weight_decay;
    cfg.batch_size = o.batch_size;
    cfg.plateau_factor = o.plateau_factor;
    cfg.plateau_patience = o.plateau_patience;
    cfg.stop_lr = o.stop_lr;
    cfg.max_epochs = o.max_epochs;
    cfg.seed = o.seed;
    if (o.loss == "rmi")
        cfg.loss_kind = train::LossKind::kRmi;
    else if (o.loss == "ce_dice")
        cfg.loss_kind = train::LossKind::kCeDice;
    else
        throw UsageError("loss must be rmi or ce_dice, got " + o.loss);
    if (cfg.plateau_factor <= 0 || cfg.plateau_factor >= 1)
        throw UsageError("plateau_factor must be in (0,1)");
    if (cfg.stop_lr >= cfg.lr0) throw UsageError("stop_lr must be below lr0");
    if (cfg.batch_size == 0) throw UsageError("batch_size must be >= 1");
    return cfg;
}

prep::PrepOptions prep_options(const Options& o) {
    prep::PrepOptions p;
    p.target_size = o.target_size;
    p.context_radius = (o.window_len - 1) / 2;
    return p;
}

std::string cpu_descriptor() {
    std::ifstream in("/proc/cpuinfo");
    std::string line;
    while (std::getline(in, line))
        if (line.rfind("model name", 0) == 0) {
            const auto colon = line.find(':');
            if (colon != std::string::npos) {
                std::string name = line.substr(colon + 1);
                const auto b = name.find_first_not_of(' ');
                return (b == std::string::npos ? name : name.substr(b)) + ", " +
                       std::to_string(std::thread::hardware_concurrency()) +
                       " threads";
            }
        }
    return "unknown cpu, " + std::to_string(std::thread::hardware_concurrency()) +
           " threads";
}

void write_run_meta(Options& o, const std::string& command, const fs::path& dir) {
    fs::create_directories(dir);
    nlohmann::json j;
    j["command"] = command;
    j["version"] = LUNGQUANT_GIT_REV;
    j["machine"] = cpu_descriptor();
    nlohmann::json cfg;
    for_each_key(o, [&](const char* k, auto& field) { cfg[k] = field; });
    cfg["out_file"] = o.out_file;
    cfg["weights"] = o.weights;
    cfg["volume"] = o.volume;
    cfg["mask"] = o.mask;
    cfg["lung_mask"] = o.lung_mask;
    cfg["pred_dir"] = o.pred_dir;
    cfg["gt_dir"] = o.gt_dir;
    nlohmann::json bs = nlohmann::json::array();
    for (auto v : o.bench_slices) bs.push_back(v);
    cfg["bench_slices"] = bs;
    j["config"] = cfg;
    std::ofstream out(dir / "run_meta.json");
    if (!out) throw DataError("cannot write run_meta.json under " + dir.string());
    out << j.dump(2) << '\n';
}

// ---- commands ---------------------------------------------------------------

int cmd_synth(Options& o) {
    synth::PhantomSpec base = synth::PhantomSpec::canonical(
        {o.grid_slices, o.grid_rows, o.grid_cols}, o.seed);
    synth::generate_cohort(o.n, base, o.seed, o.out);
    write_run_meta(o, "synth", o.out);
    std::cout << "wrote cohort of " << o.n << " phantoms under " << o.out << '\n';
    return 0;
}

int cmd_train(Options& o) {
    if (o.manifest.empty()) throw UsageError("train requires --manifest");
    volio::Dataset data = volio::load_dataset(o.manifest);
    auto splits = train::make_folds(data.records.size(), o.folds, o.val_size, o.seed);
    if (o.fold_index >= splits.size())
        throw UsageError("fold_index out of range");
    auto trained = train::train_fold<float>(splits[o.fold_index], data,
                                            net_config(o), train_config(o),
                                            prep_options(o));
    fs::create_directories(o.out);
    const fs::path wpath =
        fs::path(o.out) / ("fold" + std::to_string(o.fold_index) + ".weights");
    net::save_params(trained.params, wpath);
    train::write_history_csv(trained.history,
                             fs::path(o.out) / ("fold" + std::to_string(o.fold_index) +
                                                "_history.csv"));
    write_run_meta(o, "train", o.out);
    std::cout << "saved " << wpath.string() << " (best val loss "
              << trained.history.best_val_loss << " at epoch "
              << trained.history.best_epoch << ")\n";
    return 0;
}

int cmd_crossval(Options& o) {
    if (o.manifest.empty()) throw UsageError("crossval requires --manifest");
    volio::Dataset data = volio::load_dataset(o.manifest);
    auto res = train::cross_validate<float>(data, net_config(o), train_config(o),
                                            prep_options(o), o.out, o.folds,
                                            o.val_size);
    write_run_meta(o, "crossval", o.out);
    std::cout << "wrote " << res.model_files.size() << " models and "
              << res.prediction_files.size() << " predictions under " << o.out
              << '\n';
    return 0;
}

int cmd_predict(Options& o) {
    if (o.weights.empty() || o.volume.empty() || o.out_file.empty())
        throw UsageError("predict requires --weights, --volume and --out-file");
    auto params = net::load_params<float>(o.weights);
    volio::CtVolume vol = volio::load_volume(o.volume);
    volio::LabelMask pred =
        train::predict_volume(params, net_config(o), vol, prep_options(o));
    const fs::path out_file(o.out_file);
    if (out_file.has_parent_path()) fs::create_directories(out_file.parent_path());
    volio::save_mask(pred, out_file);
    write_run_meta(o, "predict",
                   out_file.has_parent_path() ? out_file.parent_path() : fs::path("."));
    std::cout << "wrote " << o.out_file << '\n';
    return 0;
}

int cmd_quantify(Options& o) {
    if (o.mask.empty() || o.out_file.empty())
        throw UsageError("quantify requires --mask and --out-file");
    volio::LabelMask mask = volio::load_mask(o.mask);
    if (!o.lung_mask.empty()) {
        volio::LabelMask lung = volio::load_mask(o.lung_mask);
        if (lung.labels.size() != mask.labels.size())
            throw DataError("lung mask shape differs from lesion mask");
        Tensor<std::uint8_t> plane(lung.labels.dims());
        for (std::size_t i = 0; i < plane.size(); ++i)
            plane.data()[i] = lung.labels.data()[i] != 0 ? 1 : 0;
        mask.lung = std::move(plane);
    }
    quant::QuantReport report = quant::quantify(mask);
    const fs::path out_file(o.out_file);
    if (out_file.has_parent_path()) fs::create_directories(out_file.parent_path());
    std::ofstream out(out_file);
    if (!out) throw DataError("cannot write " + o.out_file);
    out << quant::quant_csv_header() << '\n' << quant::quant_csv_row(report) << '\n';
    write_run_meta(o, "quantify",
                   out_file.has_parent_path() ? out_file.parent_path() : fs::path("."));
    std::cout << quant::quant_csv_header() << '\n'
              << quant::quant_csv_row(report) << '\n';
    return 0;
}

std::vector<volio::LabelMask> load_mask_dir(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw DataError("not a directory: " + dir.string());
    std::vector<fs::path> paths;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file() && e.path().extension() == ".mask")
            paths.push_back(e.path());
    std::sort(paths.begin(), paths.end());
    std::vector<volio::LabelMask> masks;
    for (const auto& p : paths) masks.push_back(volio::load_mask(p));
    std::sort(masks.begin(), masks.end(),
              [](const auto& a, const auto& b) { return a.patient_id < b.patient_id; });
    return masks;
}

int cmd_evaluate(Options& o) {
    if (o.pred_dir.empty() || o.gt_dir.empty())
        throw UsageError("evaluate requires --pred-dir and --gt-dir");
    auto pred = load_mask_dir(o.pred_dir);
    auto gt = load_mask_dir(o.gt_dir);
    eval::EvalReport report = eval::build_report(pred, gt);
    fs::create_directories(o.out);
    const fs::path out(o.out);
    eval::write_report_csv(report, out / "report.csv");
    eval::write_summary_json(report, out / "summary.json");
    eval::write_ba_points_csv(report, out / "ba_points.csv");
    eval::write_scatter_points_csv(report, out / "scatter_points.csv");
    eval::write_scatter_svg(report, out / "scatter.svg");
    eval::write_ba_svg(report, out / "bland_altman.svg");
    write_run_meta(o, "evaluate", o.out);
    std::cout << "evaluated " << report.n_patients << " patients; mean lesion dice "
              << report.lesion_dice.mean << '\n';
    return 0;
}

int cmd_bench(Options& o) {
    if (o.bench_side % 4 != 0)
        throw UsageError("bench_side must be divisible by 4");
    net::NetworkConfig ours_cfg = net_config(o);
    auto ours = net::init_dual_params<float>(ours_cfg, o.seed);
    bench::UnetConfig u2_cfg;
    u2_cfg.width = o.unet2d_width;
    bench::UnetConfig u3_cfg;
    u3_cfg.width = o.unet3d_width;
    auto u2 = bench::init_unet2d_params<float>(u2_cfg, o.seed + 1);
    auto u3 = bench::init_unet3d_params<float>(u3_cfg, o.seed + 2);

    std::vector<bench::BenchResult> rows;
    Rng rng(o.seed);
    for (std::size_t n : o.bench_slices) {
        Tensor<float> stack({n, o.bench_side, o.bench_side});
        for (std::size_t i = 0; i < stack.size(); ++i)
            stack.data()[i] = float(rng.uniform());
        rows.push_back(bench::bench_ours(ours, ours_cfg, stack, o.reps));
        rows.push_back(bench::bench_unet2d(u2, u2_cfg, stack, o.reps));
        rows.push_back(bench::bench_unet3d(u3, u3_cfg, stack, o.reps));
    }
    fs::create_directories(o.out);
    bench::write_bench_json(rows, fs::path(o.out) / "bench.json", cpu_descriptor());
    write_run_meta(o, "bench", o.out);
    for (const auto& r : rows)
        std::cout << r.model << " n=" << r.n_slices << " median "
                  << r.median_seconds << " s, peak " << r.peak_bytes << " bytes"
                  << (r.oom ? " (oom)" : "") << '\n';
    return 0;
}

void add_net_flags(CLI::App* c, Options& o) {
    c->add_option("--target-size", o.target_size, "in-plane resolution after resize");
    c->add_option("--window-len", o.window_len, "slices per window (odd)");
    c->add_option("--dense-layers", o.dense_layers);
    c->add_option("--dense-growth", o.dense_growth);
    c->add_option("--lstm-hidden", o.lstm_hidden);
    c->add_option("--head-channels", o.head_channels);
}

void add_train_flags(CLI::App* c, Options& o) {
    c->add_option("--lr0", o.lr0);
    c->add_option("--momentum", o.momentum);
    c->add_option("--weight-decay", o.weight_decay);
    c->add_option("--batch-size", o.batch_size);
    c->add_option("--plateau-factor", o.plateau_factor);
    c->add_option("--plateau-patience", o.plateau_patience);
    c->add_option("--stop-lr", o.stop_lr);
    c->add_option("--loss", o.loss, "rmi | ce_dice");
    c->add_option("--max-epochs", o.max_epochs);
    c->add_option("--folds", o.folds);
    c->add_option("--val-size", o.val_size);
    c->add_option("--workers", o.workers, "data-loading parallelism cap");
}

}  // namespace

int main(int argc, char** argv) {
    Options o;

    // the config file (when given) is applied before CLI11 assigns flag
    // values, so flags always win
    for (int i = 1; i < argc; ++i) {
        const std::string a = argv[i];
        try {
            if (a == "--config" && i + 1 < argc)
                apply_config_file(o, argv[i + 1]);
            else if (a.rfind("--config=", 0) == 0)
                apply_config_file(o, a.substr(9));
        } catch (const UsageError& e) {
            std::cerr << "error: " << e.what() << '\n';
            return 2;
        }
    }

    CLI::App app{"ConvLSTM attention segmentation pipeline"};
    app.require_subcommand(1);
    std::string config_path;

    auto add_common = [&](CLI::App* c) {
        c->add_option("--config", config_path, "key=value config file");
        c->add_option("--seed", o.seed);
        c->add_option("--device", o.device)
            ->check(CLI::IsMember({"portable", "accelerated"}));
        c->add_option("--out", o.out, "output directory");
    };

    CLI::App* synth = app.add_subcommand("synth", "generate a phantom cohort");
    add_common(synth);
    synth->add_option("--n", o.n, "number of phantoms");
    synth->add_option("--slices", o.grid_slices);
    synth->add_option("--rows", o.grid_rows);
    synth->add_option("--cols", o.grid_cols);

    CLI::App* tr = app.add_subcommand("train", "train one fold");
    add_common(tr);
    tr->add_option("--manifest", o.manifest, "dataset manifest");
    tr->add_option("--fold-index", o.fold_index);
    add_net_flags(tr, o);
    add_train_flags(tr, o);

    CLI::App* cv = app.add_subcommand("crossval", "k-fold cross-validation");
    add_common(cv);
    cv->add_option("--manifest", o.manifest, "dataset manifest");
    add_net_flags(cv, o);
    add_train_flags(cv, o);

    CLI::App* pr = app.add_subcommand("predict", "segment one volume");
    add_common(pr);
    pr->add_option("--weights", o.weights, "trained weights file");
    pr->add_option("--volume", o.volume, "input CT volume");
    pr->add_option("--out-file", o.out_file, "output mask path");
    add_net_flags(pr, o);

    CLI::App* qu = app.add_subcommand("quantify", "volumes and burden from a mask");
    add_common(qu);
    qu->add_option("--mask", o.mask, "label mask file");
    qu->add_option("--lung-mask", o.lung_mask, "optional lung mask file");
    qu->add_option("--out-file", o.out_file, "output CSV path");

    CLI::App* ev = app.add_subcommand("evaluate", "compare predictions to truth");
    add_common(ev);
    ev->add_option("--pred-dir", o.pred_dir, "directory of predicted masks");
    ev->add_option("--gt-dir", o.gt_dir, "directory of reference masks");

    CLI::App* be = app.add_subcommand("bench", "time/memory benchmark");
    add_common(be);
    be->add_option("--bench-slices", o.bench_slices, "slice counts to benchmark");
    be->add_option("--reps", o.reps);
    be->add_option("--side", o.bench_side, "in-plane size (divisible by 4)");
    be->add_option("--unet2d-width", o.unet2d_width);
    be->add_option("--unet3d-width", o.unet3d_width);
    add_net_flags(be, o);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    set_gemm_backend_accelerated(o.device == "accelerated");

    try {
        if (synth->parsed()) return cmd_synth(o);
        if (tr->parsed()) return cmd_train(o);
        if (cv->parsed()) return cmd_crossval(o);
        if (pr->parsed()) return cmd_predict(o);
        if (qu->parsed()) return cmd_quantify(o);
        if (ev->parsed()) return cmd_evaluate(o);
        if (be->parsed()) return cmd_bench(o);
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const DataError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 3;
    } catch (const NumericError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
