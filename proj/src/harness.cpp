#include "splitshield/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <sstream>

#include "json.hpp"
#include "splitshield/metrics.hpp"
#include "splitshield/report.hpp"

namespace splitshield {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

std::string sanitize(const std::string& s) {
    std::string out;
    for (char c : s) {
        if (std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_')
            out += c;
        else if (c == '(')
            out += '_';
        // ')' and other punctuation dropped
    }
    return out;
}

std::string now_iso8601() {
    const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
    return buf;
}

struct DefenseOutcome {
    double accuracy = 0.0;
    std::vector<AttackResult> records;
};

const AttackResult& find_record(const std::vector<AttackResult>& records,
                                const std::string& strategy) {
    for (const auto& r : records)
        if (r.strategy == strategy) return r;
    throw std::logic_error("missing attack record: " + strategy);
}

// Trains one defense, measures accuracy, intercepts the eval transmissions
// and runs the requested attack strategies against them.
DefenseOutcome evaluate_defense(const ExperimentConfig& config, DefenseKind kind,
                                const DatasetSplits& splits, bool with_adaptive,
                                std::vector<std::string>* artifacts,
                                const std::string& mosaic_dir) {
    DefenseConfig dcfg = config.defense;
    dcfg.kind = kind;
    const std::string kind_name = defense_kind_name(kind);
    auto defense =
        build_defense(dcfg, config.arch_spec(), config.plan, splits.train,
                      derive_seed(config.master_seed, "defense/" + kind_name));

    DefenseOutcome out;
    out.accuracy = accuracy([&](const Tensor& x) { return defense->infer(x); }, splits.eval);

    const Tensor intercepted = defense->client_forward(splits.eval.normalized_images());
    AttackOptions options;
    options.strategies = {AttackStrategy::Single};
    if (with_adaptive) options.strategies.push_back(AttackStrategy::Adaptive);
    options.shadow = config.shadow_config();
    options.decoder = config.decoder_config();
    options.parallel = config.defense.parallel;
    out.records = run_attack(defense->attack_surface(), splits.aux, splits.eval.images,
                             intercepted, options,
                             derive_seed(config.master_seed, "attack/" + kind_name));

    if (artifacts) {
        for (const auto& r : out.records) {
            const std::string path =
                mosaic_dir + "/mosaic_" + sanitize(kind_name) + "_" + sanitize(r.strategy) +
                ".png";
            write_mosaic_png(path, {splits.eval.images, r.reconstructions});
            artifacts->push_back(path);
        }
    }
    return out;
}

void append_attack_records(const std::string& path, const std::string& defense_name,
                           const std::vector<AttackResult>& records) {
    std::string lines;
    for (const auto& r : records) {
        ordered_json j;
        j["defense"] = defense_name;
        j["strategy"] = r.strategy;
        j["ssim"] = r.ssim_score;
        j["psnr"] = r.psnr_score;
        j["budget"] = r.budget_steps;
        j["seed"] = r.seed;
        lines += j.dump() + "\n";
    }
    append_text_file(path, lines);
}

void write_run_meta(const std::string& path, const ExperimentConfig& config,
                    const std::string& verb, double wall_seconds,
                    std::vector<std::string>& artifacts) {
    ordered_json meta;
    meta["verb"] = verb;
    meta["finished_at"] = now_iso8601();
    meta["wall_seconds"] = wall_seconds;
    meta["master_seed"] = config.master_seed;
    meta["scale"] = config.scale;
    write_text_file(path, meta.dump(2) + "\n");
    artifacts.push_back(path);
}

}  // namespace

RunReport run_defense_bench(const ExperimentConfig& config) {
    const auto t0 = std::chrono::steady_clock::now();
    RunReport report;
    fs::create_directories(config.out_dir);
    const std::string csv_path = config.out_dir + "/report.csv";
    const std::string jsonl_path = config.out_dir + "/attacks.jsonl";
    write_text_file(jsonl_path, "");

    const DatasetSplits splits = load_dataset(config.dataset_spec());

    // Canonical evaluation order; the undefended baseline always runs first
    // because every row's accuracy delta is measured against it.
    static const DefenseKind kOrder[] = {DefenseKind::None,          DefenseKind::SingleNoise,
                                         DefenseKind::TrainedNoise,  DefenseKind::DropoutSingle,
                                         DefenseKind::DropoutEnsemble, DefenseKind::Ensembler};
    auto requested = [&](DefenseKind k) {
        const std::string name = defense_kind_name(k);
        return std::find(config.bench_rows.begin(), config.bench_rows.end(), name) !=
               config.bench_rows.end();
    };
    for (const auto& row : config.bench_rows) defense_kind_from_name(row);  // validate up front

    auto flush_csv = [&]() {
        CsvTable t;
        t.header = {"name", "acc", "delta_acc", "ssim", "psnr"};
        for (const auto& r : report.rows)
            t.rows.push_back({r.name, fmt_metric(r.accuracy), fmt_metric(r.delta_acc),
                              fmt_metric(r.ssim), fmt_metric(r.psnr)});
        write_text_file(csv_path, csv_to_string(t));
    };

    std::vector<Tensor> summary_rows = {splits.eval.images};
    double baseline_acc = 0.0;
    try {
        for (DefenseKind kind : kOrder) {
            const bool is_baseline = kind == DefenseKind::None;
            if (!requested(kind) && !is_baseline) continue;
            const bool adaptive =
                kind == DefenseKind::Ensembler && config.attack_adaptive;
            DefenseOutcome outcome = evaluate_defense(config, kind, splits, adaptive,
                                                      &report.artifacts, config.out_dir);
            if (is_baseline) baseline_acc = outcome.accuracy;
            const std::string kind_name = defense_kind_name(kind);
            append_attack_records(jsonl_path, kind_name, outcome.records);

            if (!requested(kind)) continue;
            auto add_row = [&](const std::string& row_name, const AttackResult& r) {
                report.rows.push_back({row_name, outcome.accuracy,
                                       outcome.accuracy - baseline_acc, r.ssim_score,
                                       r.psnr_score});
                summary_rows.push_back(r.reconstructions);
            };
            const AttackResult& best_ssim = find_record(outcome.records, "best-ssim");
            const AttackResult& best_psnr = find_record(outcome.records, "best-psnr");
            switch (kind) {
                case DefenseKind::None:
                    add_row("None", best_ssim);
                    break;
                case DefenseKind::SingleNoise:
                    add_row("Single", best_ssim);
                    break;
                case DefenseKind::TrainedNoise:
                    add_row("TrainedNoise", best_ssim);
                    break;
                case DefenseKind::DropoutSingle:
                    add_row("DR-single", best_ssim);
                    break;
                case DefenseKind::DropoutEnsemble: {
                    // Best per metric over the N nets, as the ensemble rows do.
                    BenchRowResult r{"DR-" + std::to_string(config.defense.ensemble_size),
                                     outcome.accuracy, outcome.accuracy - baseline_acc,
                                     best_ssim.ssim_score, best_psnr.psnr_score};
                    report.rows.push_back(r);
                    summary_rows.push_back(best_ssim.reconstructions);
                    break;
                }
                case DefenseKind::Ensembler: {
                    if (config.attack_adaptive)
                        add_row("Ours-Adaptive", find_record(outcome.records, "adaptive"));
                    add_row("Ours-SSIM", best_ssim);
                    add_row("Ours-PSNR", best_psnr);
                    break;
                }
            }
            flush_csv();
        }
    } catch (...) {
        flush_csv();  // keep partial results on disk
        throw;
    }
    flush_csv();
    report.artifacts.push_back(csv_path);
    report.artifacts.push_back(jsonl_path);

    const std::string summary_path = config.out_dir + "/summary_mosaic.png";
    write_mosaic_png(summary_path, summary_rows);
    report.artifacts.push_back(summary_path);

    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    write_run_meta(config.out_dir + "/run_meta.json", config, "bench-defense", wall,
                   report.artifacts);
    return report;
}

RunReport run_split_sweep(const ExperimentConfig& config, const std::vector<std::size_t>& heads,
                          const std::vector<std::size_t>& tails) {
    const auto t0 = std::chrono::steady_clock::now();
    RunReport report;
    report.sweep_heads = heads;
    report.sweep_tails = tails;
    fs::create_directories(config.out_dir);

    const DatasetSplits splits = load_dataset(config.dataset_spec());
    const ArchSpec arch = config.arch_spec();
    const std::size_t units = build_model(arch, 0).unit_count();

    const double nan = std::numeric_limits<double>::quiet_NaN();
    report.grid_ssim.assign(heads.size(), std::vector<double>(tails.size(), nan));
    report.grid_psnr.assign(heads.size(), std::vector<double>(tails.size(), nan));
    std::vector<std::vector<Tensor>> cell_recon(heads.size(),
                                                std::vector<Tensor>(tails.size()));
    std::string log;

    for (std::size_t hi = 0; hi < heads.size(); ++hi) {
        for (std::size_t ti = 0; ti < tails.size(); ++ti) {
            const std::size_t h = heads[hi], t = tails[ti];
            if (h < 1 || h + t >= units) {
                log += "skip h=" + std::to_string(h) + " t=" + std::to_string(t) +
                       ": invalid plan for " + arch.name + " with " + std::to_string(units) +
                       " units\n";
                continue;
            }
            ExperimentConfig cell = config;
            cell.plan = {h, t};
            cell.master_seed =
                derive_seed(config.master_seed, "sweep/" + std::to_string(h) + "/" +
                                                    std::to_string(t));
            DefenseOutcome outcome =
                evaluate_defense(cell, DefenseKind::None, splits, false, nullptr, "");
            const AttackResult& best = find_record(outcome.records, "best-ssim");
            report.grid_ssim[hi][ti] = best.ssim_score;
            report.grid_psnr[hi][ti] = find_record(outcome.records, "best-psnr").psnr_score;
            cell_recon[hi][ti] = best.reconstructions;
        }
    }

    auto grid_csv = [&](const std::vector<std::vector<double>>& grid) {
        CsvTable t;
        t.header = {"head_depth"};
        for (std::size_t tail : tails) t.header.push_back("t" + std::to_string(tail));
        for (std::size_t hi = 0; hi < heads.size(); ++hi) {
            std::vector<std::string> row = {std::to_string(heads[hi])};
            for (std::size_t ti = 0; ti < tails.size(); ++ti) {
                const double v = grid[hi][ti];
                row.push_back(std::isnan(v) ? "skipped" : fmt_metric(v));
            }
            t.rows.push_back(std::move(row));
        }
        return csv_to_string(t);
    };
    const std::string ssim_path = config.out_dir + "/sweep_ssim.csv";
    const std::string psnr_path = config.out_dir + "/sweep_psnr.csv";
    write_text_file(ssim_path, grid_csv(report.grid_ssim));
    write_text_file(psnr_path, grid_csv(report.grid_psnr));
    report.artifacts.push_back(ssim_path);
    report.artifacts.push_back(psnr_path);
    if (!log.empty()) {
        const std::string log_path = config.out_dir + "/sweep_log.txt";
        write_text_file(log_path, log);
        report.artifacts.push_back(log_path);
    }

    // Mosaic: head depth vertical, tail depth horizontal; each cell shows
    // the first eval image's reconstruction for that split.
    {
        const auto img_shape = splits.eval.image_shape();
        std::vector<Tensor> mosaic_rows;
        for (std::size_t hi = 0; hi < heads.size(); ++hi) {
            Tensor row({tails.size(), img_shape[0], img_shape[1], img_shape[2]});
            for (std::size_t ti = 0; ti < tails.size(); ++ti) {
                const Tensor& rec = cell_recon[hi][ti];
                if (rec.numel() == 0) continue;  // skipped cell stays dark
                const std::size_t per = shape_numel(img_shape);
                std::copy_n(rec.data.data(), per, row.data.data() + ti * per);
            }
            mosaic_rows.push_back(std::move(row));
        }
        const std::string mosaic_path = config.out_dir + "/sweep_mosaic.png";
        write_mosaic_png(mosaic_path, mosaic_rows, tails.size());
        report.artifacts.push_back(mosaic_path);
        const std::string orig_path = config.out_dir + "/sweep_original.png";
        std::vector<std::size_t> first = {0};
        write_mosaic_png(orig_path, {splits.eval.raw_batch(first)}, 1);
        report.artifacts.push_back(orig_path);
    }

    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    write_run_meta(config.out_dir + "/run_meta.json", config, "sweep-splits", wall,
                   report.artifacts);
    return report;
}

namespace {

LabeledDataset make_random_dataset(std::size_t n, const std::vector<std::size_t>& image_shape,
                                   std::size_t classes, std::uint64_t seed) {
    LabeledDataset d;
    d.class_count = classes;
    d.norm_mean = {0.5f};
    d.norm_std = {0.5f};
    d.images = Tensor({n, image_shape[0], image_shape[1], image_shape[2]});
    SeedStream rng = derive_stream(seed, "random-dataset");
    for (auto& v : d.images.data) v = static_cast<float>(rng.next_unit());
    d.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) d.labels[i] = static_cast<int>(i % classes);
    return d;
}

LatencyBreakdown median_breakdown(std::vector<LatencyBreakdown> runs) {
    auto med = [&](auto getter) {
        std::vector<double> v;
        for (const auto& r : runs) v.push_back(getter(r));
        std::sort(v.begin(), v.end());
        const std::size_t n = v.size();
        return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
    };
    LatencyBreakdown out;
    out.client_s = med([](const LatencyBreakdown& b) { return b.client_s; });
    out.server_s = med([](const LatencyBreakdown& b) { return b.server_s; });
    out.total_s = med([](const LatencyBreakdown& b) { return b.total_s; });
    out.comm_s = out.total_s - out.client_s - out.server_s;  // keeps the breakdown additive
    return out;
}

}  // namespace

RunReport run_latency_bench(const ExperimentConfig& config, std::size_t batch,
                            std::size_t repeats) {
    const auto t0 = std::chrono::steady_clock::now();
    RunReport report;
    fs::create_directories(config.out_dir);
    const ArchSpec arch = config.arch_spec();
    const std::uint64_t seed = derive_seed(config.master_seed, "latency");

    // Untrained weights are fine here; only compute cost matters.
    LabeledDataset dummy = make_random_dataset(
        std::max<std::size_t>(batch, 8), arch.input_shape, arch.class_count, seed);
    Tensor x({batch, arch.input_shape[0], arch.input_shape[1], arch.input_shape[2]});
    {
        SeedStream rng = derive_stream(seed, "batch");
        for (auto& v : x.data) v = rng.next_normal(0.0f, 1.0f);
    }

    auto measure = [&](const EnsembleModel& m, const std::string& name) {
        InferenceServer server(m.bodies, ServerOptions{config.latency_parallel_bodies});
        server.start();
        ping_server(server.host(), server.port());
        client_infer(m.head, m.tail, m.key, m.noise, server.host(), server.port(), x);  // warmup
        std::vector<LatencyBreakdown> runs;
        for (std::size_t i = 0; i < repeats; ++i)
            runs.push_back(client_infer(m.head, m.tail, m.key, m.noise, server.host(),
                                        server.port(), x)
                               .latency);
        server.stop();
        report.latency_rows.push_back({name, median_breakdown(std::move(runs))});
    };

    Stage1Config s1;
    s1.arch = arch;
    s1.plan = config.plan;
    s1.sigma = config.defense.sigma;
    s1.optim = config.defense.optim;
    s1.epochs = 0;  // structure only
    Stage3Config s3;
    s3.sigma = config.defense.sigma;
    s3.epochs = 0;

    s1.count = 1;
    EnsembleModel standard = stage3_train(stage1_train(s1, dummy, derive_seed(seed, "std")),
                                          choose_selector(1, 1, seed), dummy, s3,
                                          derive_seed(seed, "std"));
    measure(standard, "StandardCI");

    s1.count = config.defense.ensemble_size;
    EnsembleModel ensemble = stage3_train(
        stage1_train(s1, dummy, derive_seed(seed, "ens")),
        choose_selector(config.defense.ensemble_size, config.defense.active_count,
                        derive_seed(seed, "key")),
        dummy, s3, derive_seed(seed, "ens"));
    measure(ensemble, "Ensembler");

    const double std_total = report.latency_rows[0].median.total_s;
    const double ens_total = report.latency_rows[1].median.total_s;
    report.latency_overhead_pct = std_total > 0 ? 100.0 * (ens_total - std_total) / std_total : 0;

    CsvTable t;
    t.header = {"name", "client_s", "server_s", "comm_s", "total_s"};
    for (const auto& row : report.latency_rows)
        t.rows.push_back({row.name, fmt_metric(row.median.client_s),
                          fmt_metric(row.median.server_s), fmt_metric(row.median.comm_s),
                          fmt_metric(row.median.total_s)});
    t.rows.push_back({"overhead_pct", "", "", "", fmt_metric(report.latency_overhead_pct)});
    const std::string path = config.out_dir + "/latency.csv";
    write_text_file(path, csv_to_string(t));
    report.artifacts.push_back(path);

    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    write_run_meta(config.out_dir + "/run_meta.json", config, "bench-latency", wall,
                   report.artifacts);
    return report;
}

std::vector<std::string> train_and_save(const ExperimentConfig& config) {
    const DatasetSplits splits = load_dataset(config.dataset_spec());
    auto defense = build_defense(
        config.defense, config.arch_spec(), config.plan, splits.train,
        derive_seed(config.master_seed, "defense/" + std::string(defense_kind_name(
                                            config.defense.kind))));
    std::vector<std::string> paths;
    defense->save_artifacts(config.out_dir + "/train", paths);
    return paths;
}

RunReport run_attack_only(const ExperimentConfig& config) {
    const auto t0 = std::chrono::steady_clock::now();
    RunReport report;
    fs::create_directories(config.out_dir);
    const std::string jsonl_path = config.out_dir + "/attacks.jsonl";
    write_text_file(jsonl_path, "");
    const DatasetSplits splits = load_dataset(config.dataset_spec());
    const bool adaptive = config.attack_adaptive &&
                          (config.defense.kind == DefenseKind::Ensembler ||
                           config.defense.kind == DefenseKind::DropoutEnsemble);
    DefenseOutcome outcome = evaluate_defense(config, config.defense.kind, splits, adaptive,
                                              &report.artifacts, config.out_dir);
    append_attack_records(jsonl_path, defense_kind_name(config.defense.kind), outcome.records);
    report.artifacts.push_back(jsonl_path);
    for (const auto& r : outcome.records)
        report.rows.push_back({std::string(defense_kind_name(config.defense.kind)) + "/" +
                                   r.strategy,
                               outcome.accuracy, 0.0, r.ssim_score, r.psnr_score});
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    write_run_meta(config.out_dir + "/run_meta.json", config, "attack", wall, report.artifacts);
    return report;
}

std::string render_report(const std::string& out_dir) {
    std::ostringstream o;
    const std::string csv_path = out_dir + "/report.csv";
    if (fs::exists(csv_path)) {
        o << "defense bench (" << csv_path << ")\n";
        std::istringstream in(read_text_file(csv_path));
        std::string line;
        while (std::getline(in, line)) {
            std::string cell;
            std::istringstream cells(line);
            while (std::getline(cells, cell, ','))
                o << cell << std::string(cell.size() < 14 ? 14 - cell.size() : 1, ' ');
            o << "\n";
        }
    }
    for (const char* name : {"/sweep_ssim.csv", "/sweep_psnr.csv", "/latency.csv"}) {
        const std::string p = out_dir + name;
        if (fs::exists(p)) o << "\n" << p << "\n" << read_text_file(p);
    }
    const std::string jsonl = out_dir + "/attacks.jsonl";
    if (fs::exists(jsonl)) {
        o << "\nattack records (" << jsonl << ")\n" << read_text_file(jsonl);
    }
    if (o.str().empty()) o << "no report artifacts under " << out_dir << "\n";
    return o.str();
}

const std::vector<ReferenceDefenseRow>& reference_defense_rows() {
    // Full-scale published evaluation (CIFAR-10, ResNet-18, N=10, P=4).
    static const std::vector<ReferenceDefenseRow> rows = {
        {"None", 0.00, 0.49, 9.86},        {"Shredder", -2.92, 0.29, 6.70},
        {"Single", 2.15, 0.39, 7.53},      {"DR-single", 2.70, 0.35, 6.67},
        {"DR-10-SSIM", 1.42, 0.37, 7.35},  {"DR-10-PSNR", 1.42, 0.32, 7.96},
        {"Ours-Adaptive", -2.13, 0.06, 5.98}, {"Ours-SSIM", -2.13, 0.29, 4.87},
        {"Ours-PSNR", -2.13, 0.22, 5.53},
    };
    return rows;
}

const std::vector<ReferenceLatencyRow>& reference_latency_rows() {
    // Batch of 128 images, physical edge client over a wired network; the
    // encrypted-inference reference only published its total.
    static const std::vector<ReferenceLatencyRow> rows = {
        {"StandardCI", 0.66, 0.98, 2.30, 3.94},
        {"Ensembler", 0.66, 1.02, 2.45, 4.13},
        {"EncryptedInference", 0.0, 0.0, 0.0, 309.7},
    };
    return rows;
}

std::uint64_t brute_force_subset_count(std::size_t n) {
    if (n >= 64) return UINT64_MAX;
    return (1ull << n) - 1;
}

}  // namespace splitshield
