// trnet: command-line front end for the stenosis-detection pipeline.
//
// Verbs: phantom, build, train, evaluate, predict, report.
// Exit codes: 0 success, 1 runtime failure, 2 configuration error.
// Every failure prints a single line "error: <category>: <message>" to stderr.

#include "trnet/evaluation.hpp"
#include "trnet/io.hpp"
#include "trnet/model.hpp"
#include "trnet/phantom.hpp"
#include "trnet/sampling.hpp"
#include "trnet/training.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <random>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace trnet;

namespace {

// ---------------------------------------------------------------------------
// Small shared helpers
// ---------------------------------------------------------------------------

json load_config_file(const std::string& path) {
    if (path.empty()) return json::object();
    if (!fs::exists(path)) throw config_error("config file not found: " + path);
    try {
        return read_json(path);
    } catch (const nlohmann::json::exception& e) {
        throw config_error("config file " + path + ": " + e.what());
    }
}

void ensure_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw runtime_failure("cannot create output directory " + dir.string());
}

std::string fmt4(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.4f", v);
    return buf;
}

std::string fmt_opt(const std::optional<double>& v) { return v ? fmt4(*v) : "n/a"; }

json counts_json(const ConfusionCounts& c) {
    return json{{"tp", c.tp}, {"fp", c.fp}, {"tn", c.tn}, {"fn", c.fn}};
}

json metrics_json(const MetricsReport& m) {
    const auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(); };
    return json{{"acc", opt(m.acc)},   {"sens", opt(m.sens)}, {"spec", opt(m.spec)},
                {"ppv", opt(m.ppv)},   {"npv", opt(m.npv)},   {"f1", opt(m.f1)},
                {"mcc", m.mcc_defined ? json(m.mcc) : json()}};
}

/// Console/CSV column order follows the evaluation table: ACC, Sens, Spec,
/// PPV, NPV, F1, MCC.
void print_metrics_row(std::ostream& os, const std::string& name, const MetricsReport& m) {
    os << name;
    for (const auto& v : {m.acc, m.sens, m.spec, m.ppv, m.npv, m.f1})
        os << "\t" << fmt_opt(v);
    os << "\t" << (m.mcc_defined ? fmt4(m.mcc) : "n/a") << "\n";
}

void print_metrics_header(std::ostream& os, const std::string& label) {
    os << label << "\tACC\tSens\tSpec\tPPV\tNPV\tF1\tMCC\n";
}

std::string metrics_csv_row(const std::string& name, const MetricsReport& m,
                            const ConfusionCounts& c) {
    std::string row = name;
    for (const auto& v : {m.acc, m.sens, m.spec, m.ppv, m.npv, m.f1})
        row += "," + fmt_opt(v);
    row += "," + std::string(m.mcc_defined ? fmt4(m.mcc) : "n/a");
    row += "," + std::to_string(c.tp) + "," + std::to_string(c.fp) + "," +
           std::to_string(c.tn) + "," + std::to_string(c.fn);
    return row;
}

// ---------------------------------------------------------------------------
// phantom
// ---------------------------------------------------------------------------

struct PhantomOpts {
    std::string config, out;
    std::uint64_t seed = 0;
    bool seed_set = false;
    bool verbose = false;
};

/// Random non-overlapping plaque placement for generator-style configs.
std::vector<PlaqueSpec> random_plaques(const json& g, Index length, std::mt19937_64& rng) {
    const Index n_min = g.value("plaques_min", Index(1));
    const Index n_max = g.value("plaques_max", Index(2));
    const double nar_min = g.value("narrowing_min", 0.2);
    const double nar_max = g.value("narrowing_max", 0.9);
    const Index len_min = g.value("length_min", Index(10));
    const Index len_max = g.value("length_max", Index(25));
    const double calc_frac = g.value("calcified_fraction", 0.5);
    const std::string profile = g.value("profile", "smooth");
    if (n_min < 0 || n_max < n_min) throw config_error("generate: bad plaques_min/plaques_max");
    if (len_min < 1 || len_max < len_min || len_max > length)
        throw config_error("generate: bad length_min/length_max");
    if (!(nar_min >= 0 && nar_max <= 1 && nar_min <= nar_max))
        throw config_error("generate: narrowing range must lie in [0,1]");

    std::uniform_int_distribution<Index> count(n_min, n_max);
    std::uniform_int_distribution<Index> plen(len_min, len_max);
    std::uniform_real_distribution<double> nar(nar_min, nar_max);
    std::uniform_real_distribution<double> u(0.0, 1.0);

    std::vector<PlaqueSpec> out;
    const Index want = count(rng);
    for (Index i = 0; i < want; ++i) {
        for (int attempt = 0; attempt < 50; ++attempt) {
            PlaqueSpec p;
            p.length = plen(rng);
            std::uniform_int_distribution<Index> start(0, length - p.length);
            p.start = start(rng);
            p.max_narrowing = nar(rng);
            p.kind = u(rng) < calc_frac ? PlaqueKind::calcified : PlaqueKind::non_calcified;
            if (profile == "smooth") p.profile = PlaqueProfile::smooth;
            else if (profile == "rectangular") p.profile = PlaqueProfile::rectangular;
            else if (profile == "mixed")
                p.profile = u(rng) < 0.5 ? PlaqueProfile::smooth : PlaqueProfile::rectangular;
            else throw config_error("generate: unknown profile '" + profile + "'");
            bool overlaps = false;
            for (const auto& q : out)
                if (p.start < q.start + q.length && q.start < p.start + p.length) {
                    overlaps = true;
                    break;
                }
            if (!overlaps) {
                out.push_back(p);
                break;
            }
        }
    }
    return out;
}

int cmd_phantom(const PhantomOpts& opts) {
    json cfg = load_config_file(opts.config);
    const std::uint64_t root =
        opts.seed_set ? opts.seed : cfg.value("seed", std::uint64_t(0));

    std::vector<PhantomConfig> configs;
    if (cfg.contains("phantoms")) {
        std::size_t i = 0;
        for (const auto& pj : cfg.at("phantoms")) {
            PhantomConfig pc = phantom_config_from_json(pj);
            if (!pj.contains("seed")) pc.seed = derive_seed(root, i);
            if (pc.id.empty()) {
                char buf[16];
                std::snprintf(buf, sizeof(buf), "cl_%03zu", i);
                pc.id = buf;
            }
            configs.push_back(std::move(pc));
            ++i;
        }
    } else if (cfg.contains("generate")) {
        const json& g = cfg.at("generate");
        const Index count = g.value("count", Index(0));
        if (count < 1) throw config_error("generate: count must be >= 1");
        PhantomConfig base =
            g.contains("base") ? phantom_config_from_json(g.at("base")) : PhantomConfig{};
        for (Index i = 0; i < count; ++i) {
            PhantomConfig pc = base;
            std::mt19937_64 rng(derive_seed(root, static_cast<std::uint64_t>(i)));
            pc.plaques = random_plaques(g, pc.centerline_length, rng);
            pc.seed = derive_seed(derive_seed(root, static_cast<std::uint64_t>(i)), 1);
            char buf[16];
            std::snprintf(buf, sizeof(buf), "cl_%03lld", static_cast<long long>(i));
            pc.id = buf;
            configs.push_back(std::move(pc));
        }
    } else {
        throw config_error("phantom: config needs a 'phantoms' list or a 'generate' block");
    }

    std::vector<std::string> warnings;
    auto images = generate_dataset<float>(configs, &warnings);
    for (const auto& w : warnings) std::cerr << "warning: " << w << "\n";

    const fs::path out(opts.out);
    ensure_dir(out);
    json manifest;
    manifest["kind"] = "phantom_manifest";
    manifest["seed"] = root;
    manifest["files"] = json::array();
    double pos = 0, total = 0;
    for (std::size_t i = 0; i < images.size(); ++i) {
        const std::string file = "phantom_" + configs[i].id + ".trnb";
        save_phantom(out / file, images[i], configs[i]);
        double p = 0;
        for (auto l : images[i].labels) p += l ? 1 : 0;
        pos += p;
        total += static_cast<double>(images[i].labels.size());
        manifest["files"].push_back(json{{"file", file},
                                         {"id", configs[i].id},
                                         {"centerline_length", configs[i].centerline_length},
                                         {"positive_fraction",
                                          p / static_cast<double>(images[i].labels.size())}});
    }
    write_json_atomic(out / "manifest.json", manifest);
    write_json_atomic(out / "effective_config.json", cfg.is_null() ? json::object() : cfg);
    std::cout << "phantom: wrote " << images.size() << " images to " << out.string()
              << " (positive voxel fraction " << fmt4(total > 0 ? pos / total : 0) << ")\n";
    return 0;
}

// ---------------------------------------------------------------------------
// build
// ---------------------------------------------------------------------------

struct BuildOpts {
    std::string config, data, out;
    std::uint64_t seed = 0;
    SamplingConfig flags;  // values from flags; applied only where set
    bool seed_set = false, stride_set = false, cube_set = false, seqlen_set = false,
         jitter_set = false, rotate_set = false, no_rotate = false, balance_set = false,
         no_balance = false, margin_set = false, target_set = false;
    bool verbose = false;
};

json find_manifest(const std::string& data, const char* kind, fs::path* dir_out) {
    fs::path path(data);
    if (fs::is_directory(path)) path /= "manifest.json";
    if (!fs::exists(path)) throw runtime_failure("manifest not found: " + path.string());
    json m = read_json(path);
    if (m.value("kind", "") != kind)
        throw runtime_failure(path.string() + " is not a " + kind);
    *dir_out = path.parent_path();
    return m;
}

int cmd_build(const BuildOpts& opts) {
    json cfg = load_config_file(opts.config);
    SamplingConfig scfg = cfg.contains("sampling")
                              ? sampling_config_from_json(cfg.at("sampling"))
                              : SamplingConfig{};
    if (opts.stride_set) scfg.stride = opts.flags.stride;
    if (opts.cube_set) scfg.cube_side = opts.flags.cube_side;
    if (opts.seqlen_set) scfg.max_seq_len = opts.flags.max_seq_len;
    if (opts.jitter_set) scfg.jitter_max = opts.flags.jitter_max;
    if (opts.rotate_set) scfg.rotate = true;
    if (opts.no_rotate) scfg.rotate = false;
    if (opts.balance_set) scfg.balance_trim = true;
    if (opts.no_balance) scfg.balance_trim = false;
    if (opts.margin_set) scfg.trim_margin = opts.flags.trim_margin;
    if (opts.target_set) scfg.balance_target = opts.flags.balance_target;
    if (opts.seed_set) scfg.seed = opts.seed;
    validate(scfg);

    fs::path data_dir;
    json manifest = find_manifest(opts.data, "phantom_manifest", &data_dir);
    const fs::path out(opts.out);
    ensure_dir(out);

    json out_manifest;
    out_manifest["kind"] = "sequence_manifest";
    out_manifest["seed"] = scfg.seed;
    out_manifest["sampling"] = to_json(scfg);
    out_manifest["files"] = json::array();
    Index n_sequences = 0, n_centers = 0, n_positive = 0;
    std::size_t i = 0;
    for (const auto& entry : manifest.at("files")) {
        const fs::path file = data_dir / entry.at("file").get<std::string>();
        auto img = load_phantom(file);
        SourceSequences<float> src;
        src.source_id = img.id;
        src.truth = img.labels;
        SamplingConfig per = scfg;
        per.seed = derive_seed(scfg.seed, i);
        SamplingConfig clean = per;
        clean.jitter_max = 0;
        clean.rotate = false;
        src.eval_seqs = build_sequences(img, clean);
        src.train_seqs = build_sequences(img, per);
        const std::string out_file = "seq_" + src.source_id + ".trnb";
        save_source_sequences(out / out_file, src, per);
        Index centers = 0, positives = 0;
        for (const auto& s : src.eval_seqs) {
            centers += s.length();
            for (auto l : s.labels) positives += l ? 1 : 0;
        }
        n_sequences += static_cast<Index>(src.eval_seqs.size());
        n_centers += centers;
        n_positive += positives;
        out_manifest["files"].push_back(json{{"file", out_file},
                                             {"id", src.source_id},
                                             {"sequences", src.eval_seqs.size()},
                                             {"centers", centers},
                                             {"positives", positives}});
        ++i;
    }
    write_json_atomic(out / "manifest.json", out_manifest);
    write_json_atomic(out / "effective_config.json", json{{"sampling", to_json(scfg)}});
    std::cout << "build: wrote " << n_sequences << " sequences (" << n_centers << " centers, "
              << n_positive << " positive) to " << out.string() << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainOpts {
    std::string config, data, out;
    std::uint64_t seed = 0;
    bool seed_set = false;
    Index jobs = 1;
    bool verbose = false;
    // model flags
    Index encoders = 0, heads = 0, ffn_hidden = -1;
    std::vector<Index> filters;
    bool alt_ffn = false, final_ln = false;
    // train flags
    Index epochs = 0, folds = 0, batch_size = 0;
    double lr = -1, val_fraction = -1, momentum = -1, grad_clip = -1;
    std::string optimizer, selection;
    std::vector<double> class_weights;
};

SequenceDataset<float> load_sequence_dataset(const std::string& data, json* manifest_out,
                                             fs::path* dir_out) {
    fs::path dir;
    json manifest = find_manifest(data, "sequence_manifest", &dir);
    SequenceDataset<float> ds;
    for (const auto& entry : manifest.at("files"))
        ds.push_back(load_source_sequences(dir / entry.at("file").get<std::string>()));
    if (manifest_out) *manifest_out = manifest;
    if (dir_out) *dir_out = dir;
    return ds;
}

int cmd_train(const TrainOpts& opts) {
    json cfg = load_config_file(opts.config);
    json manifest;
    fs::path data_dir;
    SequenceDataset<float> ds = load_sequence_dataset(opts.data, &manifest, &data_dir);
    if (ds.empty()) throw runtime_failure("train: sequence dataset is empty");

    ModelConfig mcfg =
        cfg.contains("model") ? model_config_from_json(cfg.at("model")) : ModelConfig{};
    // geometry is dictated by the data
    const json sampling = manifest.at("sampling");
    mcfg.cube_side = sampling.at("cube_side").get<Index>();
    mcfg.max_seq_len = sampling.at("max_seq_len").get<Index>();
    if (opts.encoders > 0) mcfg.num_encoders = opts.encoders;
    if (opts.heads > 0) mcfg.num_heads = opts.heads;
    if (opts.ffn_hidden >= 0) mcfg.ffn_hidden = opts.ffn_hidden;
    if (!opts.filters.empty()) {
        if (opts.filters.size() != 4) throw config_error("train: --filters needs 4 values");
        std::copy(opts.filters.begin(), opts.filters.end(), mcfg.conv_filters.begin());
    }
    if (opts.alt_ffn) mcfg.alt_ffn_input = true;
    if (opts.final_ln) mcfg.final_layer_norm = true;
    validate(mcfg);

    TrainConfig tcfg =
        cfg.contains("train") ? train_config_from_json(cfg.at("train")) : TrainConfig{};
    if (opts.epochs > 0) tcfg.epochs = opts.epochs;
    if (opts.folds > 0) tcfg.folds = opts.folds;
    if (opts.batch_size > 0) tcfg.batch_size = opts.batch_size;
    if (opts.lr >= 0) tcfg.learning_rate = opts.lr;
    if (opts.val_fraction > 0) tcfg.val_fraction = opts.val_fraction;
    if (opts.momentum >= 0) tcfg.momentum = opts.momentum;
    if (opts.grad_clip >= 0) tcfg.grad_clip = opts.grad_clip;
    if (!opts.optimizer.empty()) {
        if (opts.optimizer == "adaptive_moments") tcfg.optimizer = Optimizer::adaptive_moments;
        else if (opts.optimizer == "sgd_momentum") tcfg.optimizer = Optimizer::sgd_momentum;
        else throw config_error("train: unknown optimizer '" + opts.optimizer + "'");
    }
    if (!opts.selection.empty()) {
        if (opts.selection == "mcc") tcfg.selection_metric = SelectionMetric::mcc;
        else if (opts.selection == "acc") tcfg.selection_metric = SelectionMetric::acc;
        else throw config_error("train: unknown selection metric '" + opts.selection + "'");
    }
    if (!opts.class_weights.empty()) {
        if (opts.class_weights.size() != 2)
            throw config_error("train: --class-weights needs 2 values");
        tcfg.class_weights = {opts.class_weights[0], opts.class_weights[1]};
    }
    if (opts.seed_set) tcfg.seed = opts.seed;
    validate(tcfg);

    const fs::path out(opts.out);
    ensure_dir(out);
    write_json_atomic(out / "effective_config.json",
                      json{{"model", to_json(mcfg)}, {"train", to_json(tcfg)}});

    const bool verbose = opts.verbose;
    auto progress = [verbose](const std::string& msg) {
        if (verbose || msg.find(" done") != std::string::npos ||
            msg.find("FAILED") != std::string::npos)
            std::cout << msg << "\n";
    };
    CVResult<float> cv = run_cross_validation(ds, mcfg, tcfg, opts.jobs, progress);

    json cv_manifest;
    cv_manifest["kind"] = "cv_manifest";
    cv_manifest["seed"] = tcfg.seed;
    cv_manifest["model"] = to_json(mcfg);
    cv_manifest["train"] = to_json(tcfg);
    cv_manifest["folds"] = json::array();
    bool all_ok = true;
    for (std::size_t k = 0; k < cv.folds.size(); ++k) {
        const auto& fr = cv.folds[k];
        const auto& split = cv.plan.folds[k];
        json fj;
        fj["fold"] = k;
        fj["ok"] = fr.ok;
        fj["train"] = split.train;
        fj["val"] = split.val;
        fj["test"] = split.test;
        if (fr.ok) {
            const std::string ckpt = "checkpoint_fold" + std::to_string(k) + ".trnb";
            CheckpointMeta meta;
            meta.model = mcfg;
            meta.seed = derive_seed(tcfg.seed, k + 1);
            meta.input_mean = fr.trained.input_mean;
            meta.input_std = fr.trained.input_std;
            meta.class_weights = fr.trained.class_weights;
            save_checkpoint(out / ckpt, fr.trained.best_params, meta);

            const std::string logf = "log_fold" + std::to_string(k) + ".csv";
            std::string csv = "epoch,train_loss,val_loss,val_acc,val_mcc\n";
            for (const auto& r : fr.trained.log)
                csv += std::to_string(r.epoch) + "," + std::to_string(r.train_loss) + "," +
                       std::to_string(r.val_loss) + "," + std::to_string(r.val_acc) + "," +
                       std::to_string(r.val_mcc) + "\n";
            write_file_atomic(out / logf, csv);

            fj["checkpoint"] = ckpt;
            fj["log"] = logf;
            fj["best_epoch"] = fr.trained.best_epoch;
            fj["best_metric"] = fr.trained.best_metric;
        } else {
            fj["error"] = fr.error;
            all_ok = false;
        }
        cv_manifest["folds"].push_back(fj);
    }
    write_json_atomic(out / "cv_manifest.json", cv_manifest);
    std::cout << "train: " << cv.folds.size() << " folds, "
              << (all_ok ? "all succeeded" : "SOME FAILED") << "; artifacts in " << out.string()
              << "\n";
    return all_ok ? 0 : 1;
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

struct EvalOpts {
    std::string run, data, out;
    Index tolerance = 5;
    bool no_forgive = false;
    bool verbose = false;
};

int cmd_evaluate(const EvalOpts& opts) {
    const fs::path run(opts.run);
    const fs::path manifest_path = run / "cv_manifest.json";
    if (!fs::exists(manifest_path))
        throw runtime_failure("cv manifest not found: " + manifest_path.string());
    json cv = read_json(manifest_path);

    fs::path data_dir;
    json data_manifest = find_manifest(opts.data, "sequence_manifest", &data_dir);
    std::map<std::string, std::string> id_to_file;
    for (const auto& entry : data_manifest.at("files"))
        id_to_file[entry.at("id").get<std::string>()] = entry.at("file").get<std::string>();

    const bool forgive = !opts.no_forgive;
    std::vector<ConfusionCounts> fold_counts;
    json report;
    report["kind"] = "evaluation_report";
    report["tolerance"] = opts.tolerance;
    report["forgive_negatives"] = forgive;
    report["folds"] = json::array();

    std::string csv = "fold,acc,sens,spec,ppv,npv,f1,mcc,tp,fp,tn,fn\n";
    for (const auto& fj : cv.at("folds")) {
        if (!fj.value("ok", false))
            throw runtime_failure("evaluate: fold " + std::to_string(fj.value("fold", -1)) +
                                  " has no checkpoint (training failed)");
        CheckpointMeta meta;
        ModelParams<float> params =
            load_checkpoint(run / fj.at("checkpoint").get<std::string>(), &meta);
        ConfusionCounts counts;
        for (const auto& id : fj.at("test")) {
            const auto it = id_to_file.find(id.get<std::string>());
            if (it == id_to_file.end())
                throw runtime_failure("evaluate: test centerline '" + id.get<std::string>() +
                                      "' missing from the sequence dataset");
            SourceSequences<float> src = load_source_sequences(data_dir / it->second);
            standardize_cubes(src.eval_seqs, meta.input_mean, meta.input_std);
            for (const auto& seq : src.eval_seqs) {
                PredictionSequence pred = model_forward(seq, params);
                counts += tolerant_confusion(pred.labels(), pred.center_indices, src.truth,
                                             opts.tolerance, forgive);
            }
        }
        fold_counts.push_back(counts);
        MetricsReport m = compute_metrics(counts);
        report["folds"].push_back(json{{"fold", fj.at("fold")},
                                       {"counts", counts_json(counts)},
                                       {"metrics", metrics_json(m)}});
        csv += metrics_csv_row(std::to_string(fj.at("fold").get<int>()), m, counts) + "\n";
    }

    const ConfusionCounts pooled = pool_counts(fold_counts);
    const MetricsReport pooled_m = aggregate_folds(fold_counts);
    report["pooled"] = json{{"counts", counts_json(pooled)}, {"metrics", metrics_json(pooled_m)}};
    csv += metrics_csv_row("pooled", pooled_m, pooled) + "\n";

    const fs::path out = opts.out.empty() ? run : fs::path(opts.out);
    ensure_dir(out);
    write_json_atomic(out / "report.json", report);
    write_file_atomic(out / "report.csv", csv);

    print_metrics_header(std::cout, "Method");
    if (opts.verbose) {
        std::size_t k = 0;
        for (const auto& fj : report["folds"]) {
            MetricsReport m = compute_metrics(fold_counts[k]);
            print_metrics_row(std::cout, "fold " + std::to_string(fj.at("fold").get<int>()), m);
            ++k;
        }
    }
    print_metrics_row(std::cout, "TR-Net", pooled_m);
    return 0;
}

// ---------------------------------------------------------------------------
// predict
// ---------------------------------------------------------------------------

struct PredictOpts {
    std::string checkpoint, image, out, plot;
    Index stride = 5;
};

void write_prediction_plot(const fs::path& path, const MPRImage<float>& img,
                           const std::vector<Index>& centers,
                           const std::vector<std::uint8_t>& predicted) {
    // Longitudinal mid-slice (centerline on the horizontal axis), grayscale,
    // with predicted-significant centers marked by an orange column.
    const Index w = img.intensities.n0, h = img.intensities.n2;
    const Index y = img.axis_center();
    float lo = img.intensities.data.minCoeff(), hi = img.intensities.data.maxCoeff();
    if (hi <= lo) hi = lo + 1;
    std::string ppm = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
    std::vector<bool> mark(static_cast<std::size_t>(w), false);
    for (std::size_t i = 0; i < centers.size(); ++i)
        if (predicted[i]) mark[static_cast<std::size_t>(centers[i])] = true;
    for (Index x = 0; x < h; ++x)
        for (Index z = 0; z < w; ++z) {
            const float v = (img.intensities.at(z, y, x) - lo) / (hi - lo);
            unsigned char g = static_cast<unsigned char>(255.0f * v);
            if (mark[static_cast<std::size_t>(z)]) {
                ppm += static_cast<char>(255);
                ppm += static_cast<char>(140);
                ppm += static_cast<char>(0);
            } else {
                ppm += static_cast<char>(g);
                ppm += static_cast<char>(g);
                ppm += static_cast<char>(g);
            }
        }
    write_file_atomic(path, ppm);
}

int cmd_predict(const PredictOpts& opts) {
    CheckpointMeta meta;
    ModelParams<float> params = load_checkpoint(opts.checkpoint, &meta);
    auto img = load_phantom(opts.image);

    SamplingConfig scfg;
    scfg.stride = opts.stride;
    scfg.cube_side = meta.model.cube_side;
    scfg.max_seq_len = meta.model.max_seq_len;
    scfg.jitter_max = 0;
    scfg.rotate = false;
    scfg.balance_trim = false;
    validate(scfg);
    auto seqs = build_sequences(img, scfg);
    standardize_cubes(seqs, meta.input_mean, meta.input_std);

    std::vector<Index> centers;
    std::vector<double> probs;
    std::vector<std::uint8_t> labels;
    for (const auto& seq : seqs) {
        PredictionSequence pred = model_forward(seq, params);
        const auto l = pred.labels();
        for (Index i = 0; i < pred.probs.rows(); ++i) {
            centers.push_back(pred.center_indices[static_cast<std::size_t>(i)]);
            probs.push_back(pred.probs(i, 1));
            labels.push_back(l[static_cast<std::size_t>(i)]);
        }
    }

    json track;
    track["kind"] = "prediction_track";
    track["image_id"] = img.id;
    track["stride"] = opts.stride;
    track["centers"] = centers;
    track["p_significant"] = probs;
    track["predicted"] = labels;
    write_json_atomic(opts.out, track);
    if (!opts.plot.empty()) write_prediction_plot(opts.plot, img, centers, labels);

    Index n_pos = 0;
    for (auto l : labels) n_pos += l ? 1 : 0;
    std::cout << "predict: " << centers.size() << " centers, " << n_pos
              << " predicted significant; track written to " << opts.out << "\n";
    return 0;
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

struct ReportOpts {
    std::string run, out;
};

int cmd_report(const ReportOpts& opts) {
    const fs::path run(opts.run);
    const fs::path out = opts.out.empty() ? run : fs::path(opts.out);
    ensure_dir(out);

    json all;
    all["kind"] = "run_report";
    std::string md = "# Run report\n\n";

    const fs::path cv_path = run / "cv_manifest.json";
    if (fs::exists(cv_path)) {
        json cv = read_json(cv_path);
        all["cv"] = cv;
        md += "## Training\n\n";
        md += "Seed: " + std::to_string(cv.value("seed", std::uint64_t(0))) + "\n\n";
        md += "| Fold | Status | Best epoch | Best val metric |\n";
        md += "|------|--------|------------|----------------|\n";
        for (const auto& fj : cv.at("folds")) {
            md += "| " + std::to_string(fj.at("fold").get<int>()) + " | ";
            if (fj.value("ok", false))
                md += "ok | " + std::to_string(fj.at("best_epoch").get<Index>()) + " | " +
                      fmt4(fj.at("best_metric").get<double>()) + " |\n";
            else
                md += "FAILED (" + fj.value("error", std::string("?")) + ") | - | - |\n";
        }
        md += "\n";
    }

    const fs::path report_path = run / "report.json";
    if (fs::exists(report_path)) {
        json ev = read_json(report_path);
        all["evaluation"] = ev;
        md += "## Evaluation (tolerance " + std::to_string(ev.value("tolerance", Index(0))) +
              " voxels)\n\n";
        md += "| Method | ACC | Sens | Spec | PPV | NPV | F1 | MCC |\n";
        md += "|--------|-----|------|------|-----|-----|----|----|\n";
        const auto row = [](const std::string& name, const json& m) {
            std::string r = "| " + name + " |";
            for (const char* k : {"acc", "sens", "spec", "ppv", "npv", "f1", "mcc"}) {
                const json& v = m.at(k);
                r += v.is_null() ? " n/a |" : " " + fmt4(v.get<double>()) + " |";
            }
            return r + "\n";
        };
        for (const auto& fj : ev.at("folds"))
            md += row("fold " + std::to_string(fj.at("fold").get<int>()), fj.at("metrics"));
        md += row("TR-Net (pooled)", ev.at("pooled").at("metrics"));
        md += "\n";
    }

    if (!all.contains("cv") && !all.contains("evaluation"))
        throw runtime_failure("report: no cv_manifest.json or report.json under " + run.string());

    write_json_atomic(out / "report_all.json", all);
    write_file_atomic(out / "report.md", md);
    std::cout << "report: wrote " << (out / "report.md").string() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"TR-Net pipeline: phantoms, cube sequences, training, evaluation"};
    app.require_subcommand(1);

    PhantomOpts po;
    auto* sp = app.add_subcommand("phantom", "Generate a synthetic phantom dataset");
    sp->add_option("--config", po.config, "JSON config file")->required();
    sp->add_option("--out", po.out, "Output directory")->required();
    auto* po_seed = sp->add_option("--seed", po.seed, "Root seed (overrides config)");
    sp->add_flag("--verbose", po.verbose, "Verbose output");

    BuildOpts bo;
    auto* sb = app.add_subcommand("build", "Build cube-sequence datasets from phantoms");
    sb->add_option("--data", bo.data, "Phantom dataset directory or manifest")->required();
    sb->add_option("--out", bo.out, "Output directory")->required();
    sb->add_option("--config", bo.config, "JSON config file with a 'sampling' block");
    auto* bo_seed = sb->add_option("--seed", bo.seed, "Root seed (overrides config)");
    auto* bo_stride = sb->add_option("--stride", bo.flags.stride, "Center stride in voxels");
    auto* bo_cube = sb->add_option("--cube-side", bo.flags.cube_side, "Cube side N (odd)");
    auto* bo_len = sb->add_option("--max-seq-len", bo.flags.max_seq_len, "Max sequence length L");
    auto* bo_jit = sb->add_option("--jitter", bo.flags.jitter_max, "Max jitter in voxels");
    auto* bo_rot = sb->add_flag("--rotate", "Enable rotation augmentation");
    auto* bo_norot = sb->add_flag("--no-rotate", "Disable rotation augmentation");
    auto* bo_bal = sb->add_flag("--balance", "Enable balance trimming");
    auto* bo_nobal = sb->add_flag("--no-balance", "Disable balance trimming");
    auto* bo_margin = sb->add_option("--trim-margin", bo.flags.trim_margin,
                                     "Min distance (in centers) from a lesion to trim");
    auto* bo_target =
        sb->add_option("--balance-target", bo.flags.balance_target, "Target positive fraction");
    sb->add_flag("--verbose", bo.verbose, "Verbose output");

    TrainOpts to;
    auto* st = app.add_subcommand("train", "Cross-validation training");
    st->add_option("--data", to.data, "Sequence dataset directory or manifest")->required();
    st->add_option("--out", to.out, "Output directory")->required();
    st->add_option("--config", to.config, "JSON config file with 'model'/'train' blocks");
    auto* to_seed = st->add_option("--seed", to.seed, "Root seed (overrides config)");
    st->add_option("--jobs", to.jobs, "Parallel fold workers");
    st->add_option("--encoders", to.encoders, "Number of Transformer encoders T");
    st->add_option("--heads", to.heads, "Attention heads");
    st->add_option("--filters", to.filters, "Conv filters per stage (4 values)")->delimiter(',');
    st->add_option("--ffn-hidden", to.ffn_hidden, "FFN hidden width (0 = 4*D)");
    st->add_flag("--alt-ffn", to.alt_ffn, "Alternative encoder residual wiring");
    st->add_flag("--final-ln", to.final_ln, "Layer norm before the classifier");
    st->add_option("--epochs", to.epochs, "Training epochs");
    st->add_option("--folds", to.folds, "Cross-validation folds");
    st->add_option("--batch-size", to.batch_size, "Sequences per batch");
    st->add_option("--lr", to.lr, "Learning rate");
    st->add_option("--val-fraction", to.val_fraction, "Validation fraction of the fold pool");
    st->add_option("--momentum", to.momentum, "Momentum (sgd_momentum)");
    st->add_option("--grad-clip", to.grad_clip, "Global-norm gradient clip (0 = off)");
    st->add_option("--optimizer", to.optimizer, "adaptive_moments | sgd_momentum");
    st->add_option("--selection", to.selection, "Checkpoint selection metric: mcc | acc");
    st->add_option("--class-weights", to.class_weights, "Class weights (2 values; 0,0 = auto)")
        ->delimiter(',');
    st->add_flag("--verbose", to.verbose, "Per-epoch progress lines");

    EvalOpts eo;
    auto* se = app.add_subcommand("evaluate", "Tolerance-matched evaluation of a training run");
    se->add_option("--run", eo.run, "Training run directory (cv_manifest.json)")->required();
    se->add_option("--data", eo.data, "Sequence dataset directory or manifest")->required();
    se->add_option("--out", eo.out, "Report directory (default: run directory)");
    se->add_option("--tolerance", eo.tolerance, "Boundary tolerance in voxels");
    se->add_flag("--no-forgive-negatives", eo.no_forgive,
                 "Count boundary false negatives strictly");
    se->add_flag("--verbose", eo.verbose, "Print per-fold rows");

    PredictOpts pro;
    auto* spr = app.add_subcommand("predict", "Per-center predictions for one image");
    spr->add_option("--checkpoint", pro.checkpoint, "Checkpoint file")->required();
    spr->add_option("--image", pro.image, "Phantom image file")->required();
    spr->add_option("--out", pro.out, "Output prediction track (JSON)")->required();
    spr->add_option("--plot", pro.plot, "Optional PPM rendering of predicted centers");
    spr->add_option("--stride", pro.stride, "Center stride in voxels");

    ReportOpts ro;
    auto* sr = app.add_subcommand("report", "Consolidated run report");
    sr->add_option("--run", ro.run, "Run directory")->required();
    sr->add_option("--out", ro.out, "Output directory (default: run directory)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: config: " << e.what() << "\n";
        return 2;
    }

    try {
        if (sp->parsed()) {
            po.seed_set = po_seed->count() > 0;
            return cmd_phantom(po);
        }
        if (sb->parsed()) {
            bo.seed_set = bo_seed->count() > 0;
            bo.stride_set = bo_stride->count() > 0;
            bo.cube_set = bo_cube->count() > 0;
            bo.seqlen_set = bo_len->count() > 0;
            bo.jitter_set = bo_jit->count() > 0;
            bo.rotate_set = bo_rot->count() > 0;
            bo.no_rotate = bo_norot->count() > 0;
            bo.balance_set = bo_bal->count() > 0;
            bo.no_balance = bo_nobal->count() > 0;
            bo.margin_set = bo_margin->count() > 0;
            bo.target_set = bo_target->count() > 0;
            return cmd_build(bo);
        }
        if (st->parsed()) {
            to.seed_set = to_seed->count() > 0;
            return cmd_train(to);
        }
        if (se->parsed()) return cmd_evaluate(eo);
        if (spr->parsed()) return cmd_predict(pro);
        if (sr->parsed()) return cmd_report(ro);
    } catch (const config_error& e) {
        std::cerr << "error: config: " << e.what() << "\n";
        return 2;
    } catch (const std::domain_error& e) {
        std::cerr << "error: config: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: runtime: " << e.what() << "\n";
        return 1;
    }
    std::cerr << "error: config: no command given\n";
    return 2;
}
