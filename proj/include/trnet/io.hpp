#pragma once

#include "trnet/common.hpp"
#include "trnet/model.hpp"
#include "trnet/phantom.hpp"
#include "trnet/sampling.hpp"
#include "trnet/training.hpp"

#include <json.hpp>

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

namespace trnet {

using json = nlohmann::ordered_json;  // deterministic key order -> byte-stable files

// ---------------------------------------------------------------------------
// Container: magic "TRNB", u32 version, u64 header length, JSON header with
// named-array descriptors, then a raw little-endian payload.
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kContainerVersion = 1;
inline constexpr char kContainerMagic[4] = {'T', 'R', 'N', 'B'};

struct NamedArray {
    std::string dtype;           // "f32", "f64", "i64", "u8"
    std::vector<Index> shape;
    std::vector<char> bytes;
};

struct Container {
    json meta;
    std::vector<std::pair<std::string, NamedArray>> arrays;

    const NamedArray& get(const std::string& name) const {
        for (const auto& [n, a] : arrays)
            if (n == name) return a;
        throw runtime_failure("container: missing array '" + name + "'");
    }
    bool has(const std::string& name) const {
        for (const auto& [n, a] : arrays)
            if (n == name) return true;
        return false;
    }
};

namespace detail {

template <class T>
std::vector<char> to_bytes(const T* data, std::size_t count) {
    std::vector<char> out(count * sizeof(T));
    std::memcpy(out.data(), data, out.size());
    return out;
}

template <class T>
void from_bytes(const std::vector<char>& bytes, T* data, std::size_t count) {
    if (bytes.size() != count * sizeof(T))
        throw runtime_failure("container: array size mismatch");
    std::memcpy(data, bytes.data(), bytes.size());
}

}  // namespace detail

template <class S>
void put_matrix(Container& c, const std::string& name, const MatrixX<S>& m) {
    static_assert(std::is_same_v<S, float> || std::is_same_v<S, double>);
    NamedArray a;
    a.dtype = std::is_same_v<S, float> ? "f32" : "f64";
    a.shape = {m.rows(), m.cols()};
    a.bytes = detail::to_bytes(m.data(), static_cast<std::size_t>(m.size()));
    c.arrays.emplace_back(name, std::move(a));
}

template <class S>
MatrixX<S> get_matrix(const Container& c, const std::string& name) {
    const NamedArray& a = c.get(name);
    if (a.shape.size() != 2) throw runtime_failure("container: '" + name + "' is not a matrix");
    MatrixX<S> m(a.shape[0], a.shape[1]);
    if (a.dtype == "f32") {
        MatrixX<float> tmp(a.shape[0], a.shape[1]);
        detail::from_bytes(a.bytes, tmp.data(), static_cast<std::size_t>(tmp.size()));
        m = tmp.template cast<S>();
    } else if (a.dtype == "f64") {
        MatrixX<double> tmp(a.shape[0], a.shape[1]);
        detail::from_bytes(a.bytes, tmp.data(), static_cast<std::size_t>(tmp.size()));
        m = tmp.template cast<S>();
    } else {
        throw runtime_failure("container: '" + name + "' has non-float dtype " + a.dtype);
    }
    return m;
}

inline void put_u8(Container& c, const std::string& name, const std::vector<std::uint8_t>& v) {
    NamedArray a;
    a.dtype = "u8";
    a.shape = {static_cast<Index>(v.size())};
    a.bytes = detail::to_bytes(v.data(), v.size());
    c.arrays.emplace_back(name, std::move(a));
}

inline std::vector<std::uint8_t> get_u8(const Container& c, const std::string& name) {
    const NamedArray& a = c.get(name);
    std::vector<std::uint8_t> v(a.bytes.size());
    detail::from_bytes(a.bytes, v.data(), v.size());
    return v;
}

inline void put_i64(Container& c, const std::string& name, const std::vector<Index>& v) {
    NamedArray a;
    a.dtype = "i64";
    a.shape = {static_cast<Index>(v.size())};
    std::vector<std::int64_t> tmp(v.begin(), v.end());
    a.bytes = detail::to_bytes(tmp.data(), tmp.size());
    c.arrays.emplace_back(name, std::move(a));
}

inline std::vector<Index> get_i64(const Container& c, const std::string& name) {
    const NamedArray& a = c.get(name);
    std::vector<std::int64_t> tmp(a.bytes.size() / sizeof(std::int64_t));
    detail::from_bytes(a.bytes, tmp.data(), tmp.size());
    return std::vector<Index>(tmp.begin(), tmp.end());
}

inline void put_f64(Container& c, const std::string& name, const std::vector<double>& v) {
    NamedArray a;
    a.dtype = "f64";
    a.shape = {static_cast<Index>(v.size())};
    a.bytes = detail::to_bytes(v.data(), v.size());
    c.arrays.emplace_back(name, std::move(a));
}

inline std::vector<double> get_f64(const Container& c, const std::string& name) {
    const NamedArray& a = c.get(name);
    std::vector<double> v(a.bytes.size() / sizeof(double));
    detail::from_bytes(a.bytes, v.data(), v.size());
    return v;
}

/// Atomic write: temp file in the same directory, then rename.
inline void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw runtime_failure("cannot open for writing: " + tmp.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw runtime_failure("write failed: " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

inline void write_container(const std::filesystem::path& path, const Container& c) {
    json header;
    header["meta"] = c.meta;
    header["arrays"] = json::array();
    std::uint64_t offset = 0;
    for (const auto& [name, a] : c.arrays) {
        json d;
        d["name"] = name;
        d["dtype"] = a.dtype;
        d["shape"] = a.shape;
        d["offset"] = offset;
        d["nbytes"] = a.bytes.size();
        header["arrays"].push_back(d);
        offset += a.bytes.size();
    }
    const std::string hs = header.dump();
    std::string out;
    out.reserve(16 + hs.size() + offset);
    out.append(kContainerMagic, 4);
    const std::uint32_t ver = kContainerVersion;
    out.append(reinterpret_cast<const char*>(&ver), 4);
    const std::uint64_t hl = hs.size();
    out.append(reinterpret_cast<const char*>(&hl), 8);
    out.append(hs);
    for (const auto& [name, a] : c.arrays) out.append(a.bytes.data(), a.bytes.size());
    write_file_atomic(path, out);
}

inline Container read_container(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw runtime_failure("cannot open: " + path.string());
    char magic[4];
    std::uint32_t ver = 0;
    std::uint64_t hl = 0;
    in.read(magic, 4);
    in.read(reinterpret_cast<char*>(&ver), 4);
    in.read(reinterpret_cast<char*>(&hl), 8);
    if (!in || std::memcmp(magic, kContainerMagic, 4) != 0)
        throw runtime_failure("not a TRNB container: " + path.string());
    if (ver != kContainerVersion)
        throw runtime_failure("unsupported container version " + std::to_string(ver));
    std::string hs(hl, '\0');
    in.read(hs.data(), static_cast<std::streamsize>(hl));
    json header = json::parse(hs);
    Container c;
    c.meta = header.at("meta");
    for (const auto& d : header.at("arrays")) {
        NamedArray a;
        a.dtype = d.at("dtype").get<std::string>();
        a.shape = d.at("shape").get<std::vector<Index>>();
        a.bytes.resize(d.at("nbytes").get<std::size_t>());
        in.read(a.bytes.data(), static_cast<std::streamsize>(a.bytes.size()));
        if (!in) throw runtime_failure("truncated container: " + path.string());
        c.arrays.emplace_back(d.at("name").get<std::string>(), std::move(a));
    }
    return c;
}

// ---------------------------------------------------------------------------
// Config <-> JSON
// ---------------------------------------------------------------------------

inline json to_json(const PlaqueSpec& p) {
    return json{{"start", p.start},
                {"length", p.length},
                {"max_narrowing", p.max_narrowing},
                {"kind", p.kind == PlaqueKind::calcified ? "calcified" : "non_calcified"},
                {"profile", p.profile == PlaqueProfile::rectangular ? "rectangular" : "smooth"}};
}

inline PlaqueSpec plaque_from_json(const json& j) {
    PlaqueSpec p;
    p.start = j.at("start").get<Index>();
    p.length = j.at("length").get<Index>();
    p.max_narrowing = j.at("max_narrowing").get<double>();
    const std::string kind = j.value("kind", "non_calcified");
    if (kind == "calcified") p.kind = PlaqueKind::calcified;
    else if (kind == "non_calcified") p.kind = PlaqueKind::non_calcified;
    else throw config_error("plaque: unknown kind '" + kind + "'");
    const std::string profile = j.value("profile", "rectangular");
    if (profile == "rectangular") p.profile = PlaqueProfile::rectangular;
    else if (profile == "smooth") p.profile = PlaqueProfile::smooth;
    else throw config_error("plaque: unknown profile '" + profile + "'");
    return p;
}

inline json to_json(const PhantomConfig& c) {
    json j{{"centerline_length", c.centerline_length},
           {"cross_section_size", c.cross_section_size},
           {"lumen_radius", c.lumen_radius},
           {"lumen_intensity", c.lumen_intensity},
           {"wall_intensity", c.wall_intensity},
           {"background_intensity", c.background_intensity},
           {"calcified_intensity", c.calcified_intensity},
           {"noise_std", c.noise_std},
           {"seed", c.seed},
           {"id", c.id}};
    j["plaques"] = json::array();
    for (const auto& p : c.plaques) j["plaques"].push_back(to_json(p));
    return j;
}

inline PhantomConfig phantom_config_from_json(const json& j) {
    PhantomConfig c;
    c.centerline_length = j.value("centerline_length", c.centerline_length);
    c.cross_section_size = j.value("cross_section_size", c.cross_section_size);
    c.lumen_radius = j.value("lumen_radius", c.lumen_radius);
    c.lumen_intensity = j.value("lumen_intensity", c.lumen_intensity);
    c.wall_intensity = j.value("wall_intensity", c.wall_intensity);
    c.background_intensity = j.value("background_intensity", c.background_intensity);
    c.calcified_intensity = j.value("calcified_intensity", c.calcified_intensity);
    c.noise_std = j.value("noise_std", c.noise_std);
    c.seed = j.value("seed", c.seed);
    c.id = j.value("id", c.id);
    if (j.contains("plaques"))
        for (const auto& p : j.at("plaques")) c.plaques.push_back(plaque_from_json(p));
    return c;
}

inline json to_json(const SamplingConfig& c) {
    return json{{"stride", c.stride},
                {"cube_side", c.cube_side},
                {"max_seq_len", c.max_seq_len},
                {"jitter_max", c.jitter_max},
                {"rotate", c.rotate},
                {"balance_trim", c.balance_trim},
                {"trim_margin", c.trim_margin},
                {"balance_target", c.balance_target},
                {"seed", c.seed}};
}

inline SamplingConfig sampling_config_from_json(const json& j) {
    SamplingConfig c;
    c.stride = j.value("stride", c.stride);
    c.cube_side = j.value("cube_side", c.cube_side);
    c.max_seq_len = j.value("max_seq_len", c.max_seq_len);
    c.jitter_max = j.value("jitter_max", c.jitter_max);
    c.rotate = j.value("rotate", c.rotate);
    c.balance_trim = j.value("balance_trim", c.balance_trim);
    c.trim_margin = j.value("trim_margin", c.trim_margin);
    c.balance_target = j.value("balance_target", c.balance_target);
    c.seed = j.value("seed", c.seed);
    return c;
}

inline json to_json(const ModelConfig& c) {
    return json{{"cube_side", c.cube_side},
                {"max_seq_len", c.max_seq_len},
                {"conv_filters", c.conv_filters},
                {"num_encoders", c.num_encoders},
                {"num_heads", c.num_heads},
                {"ffn_hidden", c.ffn_hidden},
                {"num_classes", c.num_classes},
                {"alt_ffn_input", c.alt_ffn_input},
                {"final_layer_norm", c.final_layer_norm}};
}

inline ModelConfig model_config_from_json(const json& j) {
    ModelConfig c;
    c.cube_side = j.value("cube_side", c.cube_side);
    c.max_seq_len = j.value("max_seq_len", c.max_seq_len);
    if (j.contains("conv_filters")) {
        auto f = j.at("conv_filters").get<std::vector<Index>>();
        if (f.size() != 4) throw config_error("model: conv_filters must have 4 entries");
        std::copy(f.begin(), f.end(), c.conv_filters.begin());
    }
    c.num_encoders = j.value("num_encoders", c.num_encoders);
    c.num_heads = j.value("num_heads", c.num_heads);
    c.ffn_hidden = j.value("ffn_hidden", c.ffn_hidden);
    c.num_classes = j.value("num_classes", c.num_classes);
    c.alt_ffn_input = j.value("alt_ffn_input", c.alt_ffn_input);
    c.final_layer_norm = j.value("final_layer_norm", c.final_layer_norm);
    return c;
}

inline json to_json(const TrainConfig& c) {
    return json{{"epochs", c.epochs},
                {"folds", c.folds},
                {"val_fraction", c.val_fraction},
                {"batch_size", c.batch_size},
                {"learning_rate", c.learning_rate},
                {"optimizer", c.optimizer == Optimizer::adaptive_moments ? "adaptive_moments"
                                                                         : "sgd_momentum"},
                {"momentum", c.momentum},
                {"class_weights", c.class_weights},
                {"selection_metric", c.selection_metric == SelectionMetric::mcc ? "mcc" : "acc"},
                {"grad_clip", c.grad_clip},
                {"seed", c.seed}};
}

inline TrainConfig train_config_from_json(const json& j) {
    TrainConfig c;
    c.epochs = j.value("epochs", c.epochs);
    c.folds = j.value("folds", c.folds);
    c.val_fraction = j.value("val_fraction", c.val_fraction);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    if (j.contains("optimizer")) {
        const std::string o = j.at("optimizer").get<std::string>();
        if (o == "adaptive_moments") c.optimizer = Optimizer::adaptive_moments;
        else if (o == "sgd_momentum") c.optimizer = Optimizer::sgd_momentum;
        else throw config_error("train: unknown optimizer '" + o + "'");
    }
    c.momentum = j.value("momentum", c.momentum);
    if (j.contains("class_weights")) {
        auto w = j.at("class_weights").get<std::vector<double>>();
        if (w.size() != 2) throw config_error("train: class_weights must have 2 entries");
        c.class_weights = {w[0], w[1]};
    }
    if (j.contains("selection_metric")) {
        const std::string m = j.at("selection_metric").get<std::string>();
        if (m == "mcc") c.selection_metric = SelectionMetric::mcc;
        else if (m == "acc") c.selection_metric = SelectionMetric::acc;
        else throw config_error("train: unknown selection_metric '" + m + "'");
    }
    c.grad_clip = j.value("grad_clip", c.grad_clip);
    c.seed = j.value("seed", c.seed);
    return c;
}

// ---------------------------------------------------------------------------
// Phantom files
// ---------------------------------------------------------------------------

inline void save_phantom(const std::filesystem::path& path, const MPRImage<float>& img,
                         const PhantomConfig& cfg) {
    Container c;
    c.meta["kind"] = "phantom_image";
    c.meta["version"] = 1;
    c.meta["config"] = to_json(cfg);
    MatrixX<float> grid(img.intensities.size(), 1);
    grid.col(0) = img.intensities.data;
    put_matrix(c, "intensities", grid);
    c.meta["shape"] = {img.intensities.n0, img.intensities.n1, img.intensities.n2};
    put_f64(c, "narrowing", img.narrowing);
    put_u8(c, "labels", img.labels);
    write_container(path, c);
}

inline MPRImage<float> load_phantom(const std::filesystem::path& path,
                                    PhantomConfig* cfg_out = nullptr) {
    Container c = read_container(path);
    if (c.meta.value("kind", "") != "phantom_image")
        throw runtime_failure("not a phantom image file: " + path.string());
    MPRImage<float> img;
    const auto shape = c.meta.at("shape").get<std::vector<Index>>();
    img.intensities = Volume<float>(shape[0], shape[1], shape[2]);
    MatrixX<float> grid = get_matrix<float>(c, "intensities");
    img.intensities.data = grid.col(0);
    img.narrowing = get_f64(c, "narrowing");
    img.labels = get_u8(c, "labels");
    const PhantomConfig cfg = phantom_config_from_json(c.meta.at("config"));
    img.background = static_cast<float>(cfg.background_intensity);
    img.id = cfg.id;
    if (cfg_out != nullptr) *cfg_out = cfg;
    return img;
}

// ---------------------------------------------------------------------------
// Sequence dataset files (one file per source centerline)
// ---------------------------------------------------------------------------

inline void save_source_sequences(const std::filesystem::path& path,
                                  const SourceSequences<float>& src,
                                  const SamplingConfig& cfg) {
    Container c;
    c.meta["kind"] = "sequence_source";
    c.meta["version"] = 1;
    c.meta["source_id"] = src.source_id;
    c.meta["sampling"] = to_json(cfg);
    c.meta["cube_side"] = cfg.cube_side;
    const auto pack = [&](const std::vector<VolumeSequence<float>>& seqs,
                          const std::string& prefix) {
        std::vector<Index> boundaries{0};
        std::vector<Index> centers;
        std::vector<std::uint8_t> labels;
        Index total = 0;
        for (const auto& s : seqs) {
            total += s.length();
            boundaries.push_back(total);
            centers.insert(centers.end(), s.center_indices.begin(), s.center_indices.end());
            labels.insert(labels.end(), s.labels.begin(), s.labels.end());
        }
        const Index n3 = cfg.cube_side * cfg.cube_side * cfg.cube_side;
        MatrixX<float> cubes(n3, total);
        Index col = 0;
        for (const auto& s : seqs)
            for (const auto& cube : s.cubes) cubes.col(col++) = cube.data;
        put_matrix(c, prefix + ".cubes", cubes);
        put_i64(c, prefix + ".boundaries", boundaries);
        put_i64(c, prefix + ".centers", centers);
        put_u8(c, prefix + ".labels", labels);
    };
    pack(src.eval_seqs, "eval");
    pack(src.train_seqs, "train");
    put_u8(c, "truth", src.truth);
    write_container(path, c);
}

inline SourceSequences<float> load_source_sequences(const std::filesystem::path& path,
                                                    SamplingConfig* cfg_out = nullptr) {
    Container c = read_container(path);
    if (c.meta.value("kind", "") != "sequence_source")
        throw runtime_failure("not a sequence source file: " + path.string());
    SourceSequences<float> src;
    src.source_id = c.meta.at("source_id").get<std::string>();
    const SamplingConfig cfg = sampling_config_from_json(c.meta.at("sampling"));
    if (cfg_out != nullptr) *cfg_out = cfg;
    const Index side = cfg.cube_side;
    const auto unpack = [&](const std::string& prefix) {
        std::vector<VolumeSequence<float>> seqs;
        const auto boundaries = get_i64(c, prefix + ".boundaries");
        const auto centers = get_i64(c, prefix + ".centers");
        const auto labels = get_u8(c, prefix + ".labels");
        MatrixX<float> cubes = get_matrix<float>(c, prefix + ".cubes");
        for (std::size_t s = 0; s + 1 < boundaries.size(); ++s) {
            VolumeSequence<float> seq;
            seq.source_id = src.source_id;
            for (Index i = boundaries[s]; i < boundaries[s + 1]; ++i) {
                Volume<float> cube(side, side, side);
                cube.data = cubes.col(i);
                seq.cubes.push_back(std::move(cube));
                seq.center_indices.push_back(centers[static_cast<std::size_t>(i)]);
                seq.labels.push_back(labels[static_cast<std::size_t>(i)]);
            }
            seqs.push_back(std::move(seq));
        }
        return seqs;
    };
    src.eval_seqs = unpack("eval");
    src.train_seqs = unpack("train");
    src.truth = get_u8(c, "truth");
    return src;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

struct CheckpointMeta {
    ModelConfig model;
    std::uint64_t seed = 0;
    double input_mean = 0, input_std = 1;
    std::array<double, 2> class_weights = {1, 1};
};

inline void save_checkpoint(const std::filesystem::path& path, const ModelParams<float>& params,
                            const CheckpointMeta& meta) {
    Container c;
    c.meta["kind"] = "checkpoint";
    c.meta["version"] = 1;
    c.meta["model"] = to_json(meta.model);
    c.meta["seed"] = meta.seed;
    c.meta["input_mean"] = meta.input_mean;
    c.meta["input_std"] = meta.input_std;
    c.meta["class_weights"] = meta.class_weights;
    params.for_each([&](const std::string& name, const MatrixX<float>& m) {
        put_matrix(c, name, m);
    });
    write_container(path, c);
}

inline ModelParams<float> load_checkpoint(const std::filesystem::path& path,
                                          CheckpointMeta* meta_out = nullptr) {
    Container c = read_container(path);
    if (c.meta.value("kind", "") != "checkpoint")
        throw runtime_failure("not a checkpoint file: " + path.string());
    CheckpointMeta meta;
    meta.model = model_config_from_json(c.meta.at("model"));
    meta.seed = c.meta.value("seed", 0ull);
    meta.input_mean = c.meta.value("input_mean", 0.0);
    meta.input_std = c.meta.value("input_std", 1.0);
    if (c.meta.contains("class_weights")) {
        auto w = c.meta.at("class_weights").get<std::vector<double>>();
        meta.class_weights = {w[0], w[1]};
    }
    ModelParams<float> params = init_params<float>(meta.model, 0);
    params.for_each([&](const std::string& name, MatrixX<float>& m) {
        MatrixX<float> loaded = get_matrix<float>(c, name);
        if (loaded.rows() != m.rows() || loaded.cols() != m.cols())
            throw runtime_failure("checkpoint: shape mismatch for '" + name + "'");
        m = loaded;
    });
    if (meta_out != nullptr) *meta_out = meta;
    return params;
}

inline void write_json_atomic(const std::filesystem::path& path, const json& j) {
    write_file_atomic(path, j.dump(2) + "\n");
}

inline json read_json(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw runtime_failure("cannot open: " + path.string());
    return json::parse(in);
}

}  // namespace trnet
