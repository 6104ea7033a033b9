#include "splitshield/config.hpp"

#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

namespace splitshield {

std::size_t ExperimentConfig::dataset_classes() const {
    if (dataset_name == "synthetic-shapes") return 4;
    if (dataset_name == "synthetic-blobs") return 2;
    if (dataset_name == "cifar10-subset") return 10;
    throw std::invalid_argument("unknown dataset: " + dataset_name);
}

DatasetSpec ExperimentConfig::dataset_spec() const {
    DatasetSpec s;
    s.name = dataset_name;
    s.root = dataset_root;
    s.train_size = train_size;
    s.aux_size = aux_size;
    s.eval_size = eval_size;
    s.channels = channels;
    s.image_size = image_size;
    s.seed = derive_seed(master_seed, "dataset");
    s.norm_mean = norm_mean;
    s.norm_std = norm_std;
    return s;
}

ArchSpec ExperimentConfig::arch_spec() const {
    ArchSpec a;
    a.name = arch_name;
    if (dataset_name == "cifar10-subset") {
        a.input_shape = {3, 32, 32};
    } else {
        a.input_shape = {channels, image_size, image_size};
    }
    a.class_count = dataset_classes();
    return a;
}

ShadowConfig ExperimentConfig::shadow_config() const {
    ShadowConfig s;
    s.channels = shadow_channels;
    s.optim = defense.optim;
    s.epochs = shadow_epochs;
    return s;
}

DecoderConfig ExperimentConfig::decoder_config() const {
    DecoderConfig d;
    d.channels = shadow_channels;
    d.optim = defense.optim;
    d.epochs = decoder_epochs;
    return d;
}

ExperimentConfig default_config(const std::string& scale) {
    ExperimentConfig c;
    c.scale = scale;
    if (scale == "toy") return c;
    if (scale == "paper") {
        c.dataset_name = "cifar10-subset";
        c.dataset_root = "data/cifar-10-batches-bin";
        c.train_size = 8000;
        c.aux_size = 1000;
        c.eval_size = 1000;
        c.channels = 3;
        c.image_size = 32;
        c.norm_mean = {0.4914f, 0.4822f, 0.4465f};
        c.norm_std = {0.2470f, 0.2435f, 0.2616f};
        c.arch_name = "resnet18";
        c.plan = {1, 1};
        c.defense.ensemble_size = 10;
        c.defense.active_count = 4;
        c.defense.sigma = 0.1f;
        c.defense.stage1_epochs = 30;
        c.defense.stage3_epochs = 30;
        c.defense.baseline_epochs = 30;
        c.defense.optim.batch_size = 128;
        c.shadow_epochs = 30;
        c.decoder_epochs = 40;
        c.latency_batch = 128;
        return c;
    }
    throw std::invalid_argument("unknown scale: " + scale);
}

namespace {

std::string fmt_f(float v) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(v));
    return buf;
}

std::string join_floats(const std::vector<float>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) out += ",";
        out += fmt_f(v[i]);
    }
    return out;
}

std::string join_sizes(const std::vector<std::size_t>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(v[i]);
    }
    return out;
}

std::string join_strings(const std::vector<std::string>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) out += ",";
        out += v[i];
    }
    return out;
}

std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r");
    std::size_t e = s.find_last_not_of(" \t\r");
    if (b == std::string::npos) return "";
    return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream in(s);
    while (std::getline(in, cur, ',')) {
        cur = trim(cur);
        if (!cur.empty()) out.push_back(cur);
    }
    return out;
}

struct KeyValue {
    std::map<std::string, std::string> values;  // "section.key" -> value

    const std::string& get(const std::string& k) const {
        auto it = values.find(k);
        if (it == values.end()) throw std::invalid_argument("config: missing key " + k);
        return it->second;
    }
    bool has(const std::string& k) const { return values.count(k) != 0; }
};

std::uint64_t parse_u64(const std::string& v, const std::string& key) {
    try {
        return std::stoull(v);
    } catch (...) {
        throw std::invalid_argument("config: bad integer for " + key + ": '" + v + "'");
    }
}

float parse_float(const std::string& v, const std::string& key) {
    try {
        return std::stof(v);
    } catch (...) {
        throw std::invalid_argument("config: bad number for " + key + ": '" + v + "'");
    }
}

bool parse_bool(const std::string& v, const std::string& key) {
    if (v == "true") return true;
    if (v == "false") return false;
    throw std::invalid_argument("config: bad boolean for " + key + ": '" + v + "'");
}

}  // namespace

std::string serialize_config(const ExperimentConfig& c) {
    std::ostringstream o;
    o << "schema_version = " << kConfigSchemaVersion << "\n\n";
    o << "[run]\n";
    o << "master_seed = " << c.master_seed << "\n";
    o << "scale = " << c.scale << "\n";
    o << "out_dir = " << c.out_dir << "\n\n";
    o << "[dataset]\n";
    o << "name = " << c.dataset_name << "\n";
    o << "root = " << c.dataset_root << "\n";
    o << "train_size = " << c.train_size << "\n";
    o << "aux_size = " << c.aux_size << "\n";
    o << "eval_size = " << c.eval_size << "\n";
    o << "channels = " << c.channels << "\n";
    o << "image_size = " << c.image_size << "\n";
    o << "norm_mean = " << join_floats(c.norm_mean) << "\n";
    o << "norm_std = " << join_floats(c.norm_std) << "\n\n";
    o << "[arch]\n";
    o << "name = " << c.arch_name << "\n\n";
    o << "[split]\n";
    o << "head_depth = " << c.plan.head_depth << "\n";
    o << "tail_depth = " << c.plan.tail_depth << "\n\n";
    o << "[defense]\n";
    o << "kind = " << defense_kind_name(c.defense.kind) << "\n";
    o << "ensemble_size = " << c.defense.ensemble_size << "\n";
    o << "active_count = " << c.defense.active_count << "\n";
    o << "sigma = " << fmt_f(c.defense.sigma) << "\n";
    o << "lambda = " << fmt_f(c.defense.lambda_reg) << "\n";
    o << "dropout_rate = " << fmt_f(c.defense.dropout_rate) << "\n";
    o << "noise_penalty = " << fmt_f(c.defense.noise_penalty) << "\n";
    o << "stage1_epochs = " << c.defense.stage1_epochs << "\n";
    o << "stage3_epochs = " << c.defense.stage3_epochs << "\n";
    o << "baseline_epochs = " << c.defense.baseline_epochs << "\n";
    o << "noise_epochs = " << c.defense.noise_epochs << "\n";
    o << "lr = " << fmt_f(c.defense.optim.lr) << "\n";
    o << "momentum = " << fmt_f(c.defense.optim.momentum) << "\n";
    o << "batch_size = " << c.defense.optim.batch_size << "\n";
    o << "regularize_all = " << (c.defense.regularize_all ? "true" : "false") << "\n";
    o << "parallel = " << (c.defense.parallel ? "true" : "false") << "\n";
    o << "selector_seed = " << c.selector_seed << "\n\n";
    o << "[bench]\n";
    o << "rows = " << join_strings(c.bench_rows) << "\n\n";
    o << "[attack]\n";
    o << "single = " << (c.attack_single ? "true" : "false") << "\n";
    o << "adaptive = " << (c.attack_adaptive ? "true" : "false") << "\n";
    o << "shadow_channels = " << c.shadow_channels << "\n";
    o << "shadow_epochs = " << c.shadow_epochs << "\n";
    o << "decoder_epochs = " << c.decoder_epochs << "\n\n";
    o << "[sweep]\n";
    o << "heads = " << join_sizes(c.sweep_heads) << "\n";
    o << "tails = " << join_sizes(c.sweep_tails) << "\n\n";
    o << "[latency]\n";
    o << "batch = " << c.latency_batch << "\n";
    o << "repeats = " << c.latency_repeats << "\n";
    o << "parallel_bodies = " << (c.latency_parallel_bodies ? "true" : "false") << "\n";
    return o.str();
}

ExperimentConfig parse_config(const std::string& text) {
    KeyValue kv;
    std::string section;
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#' || t[0] == ';') continue;
        if (t.front() == '[') {
            if (t.back() != ']')
                throw std::invalid_argument("config: bad section at line " +
                                            std::to_string(line_no));
            section = t.substr(1, t.size() - 2);
            continue;
        }
        const std::size_t eq = t.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("config: expected key = value at line " +
                                        std::to_string(line_no));
        const std::string key = trim(t.substr(0, eq));
        const std::string val = trim(t.substr(eq + 1));
        const std::string full = section.empty() ? key : section + "." + key;
        if (kv.values.count(full))
            throw std::invalid_argument("config: duplicate key " + full);
        kv.values[full] = val;
    }

    if (!kv.has("schema_version"))
        throw std::invalid_argument("config: missing schema_version");
    const auto version = parse_u64(kv.get("schema_version"), "schema_version");
    if (version != static_cast<std::uint64_t>(kConfigSchemaVersion))
        throw std::invalid_argument("config: unsupported schema_version " +
                                    std::to_string(version));

    ExperimentConfig c;
    c.master_seed = parse_u64(kv.get("run.master_seed"), "run.master_seed");
    c.scale = kv.get("run.scale");
    c.out_dir = kv.get("run.out_dir");

    c.dataset_name = kv.get("dataset.name");
    c.dataset_root = kv.get("dataset.root");
    c.train_size = parse_u64(kv.get("dataset.train_size"), "dataset.train_size");
    c.aux_size = parse_u64(kv.get("dataset.aux_size"), "dataset.aux_size");
    c.eval_size = parse_u64(kv.get("dataset.eval_size"), "dataset.eval_size");
    c.channels = parse_u64(kv.get("dataset.channels"), "dataset.channels");
    c.image_size = parse_u64(kv.get("dataset.image_size"), "dataset.image_size");
    c.norm_mean.clear();
    for (const auto& v : split_list(kv.get("dataset.norm_mean")))
        c.norm_mean.push_back(parse_float(v, "dataset.norm_mean"));
    c.norm_std.clear();
    for (const auto& v : split_list(kv.get("dataset.norm_std")))
        c.norm_std.push_back(parse_float(v, "dataset.norm_std"));

    c.arch_name = kv.get("arch.name");
    c.plan.head_depth = parse_u64(kv.get("split.head_depth"), "split.head_depth");
    c.plan.tail_depth = parse_u64(kv.get("split.tail_depth"), "split.tail_depth");

    c.defense.kind = defense_kind_from_name(kv.get("defense.kind"));
    c.defense.ensemble_size = parse_u64(kv.get("defense.ensemble_size"), "defense.ensemble_size");
    c.defense.active_count = parse_u64(kv.get("defense.active_count"), "defense.active_count");
    c.defense.sigma = parse_float(kv.get("defense.sigma"), "defense.sigma");
    c.defense.lambda_reg = parse_float(kv.get("defense.lambda"), "defense.lambda");
    c.defense.dropout_rate = parse_float(kv.get("defense.dropout_rate"), "defense.dropout_rate");
    c.defense.noise_penalty =
        parse_float(kv.get("defense.noise_penalty"), "defense.noise_penalty");
    c.defense.stage1_epochs = parse_u64(kv.get("defense.stage1_epochs"), "defense.stage1_epochs");
    c.defense.stage3_epochs = parse_u64(kv.get("defense.stage3_epochs"), "defense.stage3_epochs");
    c.defense.baseline_epochs =
        parse_u64(kv.get("defense.baseline_epochs"), "defense.baseline_epochs");
    c.defense.noise_epochs = parse_u64(kv.get("defense.noise_epochs"), "defense.noise_epochs");
    c.defense.optim.lr = parse_float(kv.get("defense.lr"), "defense.lr");
    c.defense.optim.momentum = parse_float(kv.get("defense.momentum"), "defense.momentum");
    c.defense.optim.batch_size = parse_u64(kv.get("defense.batch_size"), "defense.batch_size");
    c.defense.regularize_all = parse_bool(kv.get("defense.regularize_all"), "regularize_all");
    c.defense.parallel = parse_bool(kv.get("defense.parallel"), "parallel");
    c.selector_seed = parse_u64(kv.get("defense.selector_seed"), "defense.selector_seed");

    c.bench_rows = split_list(kv.get("bench.rows"));

    c.attack_single = parse_bool(kv.get("attack.single"), "attack.single");
    c.attack_adaptive = parse_bool(kv.get("attack.adaptive"), "attack.adaptive");
    c.shadow_channels = parse_u64(kv.get("attack.shadow_channels"), "attack.shadow_channels");
    c.shadow_epochs = parse_u64(kv.get("attack.shadow_epochs"), "attack.shadow_epochs");
    c.decoder_epochs = parse_u64(kv.get("attack.decoder_epochs"), "attack.decoder_epochs");

    c.sweep_heads.clear();
    for (const auto& v : split_list(kv.get("sweep.heads")))
        c.sweep_heads.push_back(parse_u64(v, "sweep.heads"));
    c.sweep_tails.clear();
    for (const auto& v : split_list(kv.get("sweep.tails")))
        c.sweep_tails.push_back(parse_u64(v, "sweep.tails"));

    c.latency_batch = parse_u64(kv.get("latency.batch"), "latency.batch");
    c.latency_repeats = parse_u64(kv.get("latency.repeats"), "latency.repeats");
    c.latency_parallel_bodies =
        parse_bool(kv.get("latency.parallel_bodies"), "latency.parallel_bodies");

    // Reject unknown keys so typos never silently fall back to defaults.
    const ExperimentConfig reference = c;
    const std::string expected = serialize_config(reference);
    KeyValue known;
    {
        std::istringstream ein(expected);
        std::string sec, l;
        while (std::getline(ein, l)) {
            const std::string t = trim(l);
            if (t.empty()) continue;
            if (t.front() == '[') {
                sec = t.substr(1, t.size() - 2);
                continue;
            }
            const std::size_t eq = t.find('=');
            const std::string key = trim(t.substr(0, eq));
            known.values[sec.empty() ? key : sec + "." + key] = "";
        }
    }
    for (const auto& [key, value] : kv.values)
        if (!known.values.count(key))
            throw std::invalid_argument("config: unknown key " + key);

    return c;
}

ExperimentConfig load_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("config: cannot open " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_config(buf.str());
}

void save_config_file(const std::string& path, const ExperimentConfig& c) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("config: cannot write " + path);
    out << serialize_config(c);
}

}  // namespace splitshield
