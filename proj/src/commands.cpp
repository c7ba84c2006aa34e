#include "filmseg/commands.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "filmseg/common.hpp"
#include "filmseg/gradcheck.hpp"
#include "filmseg/pipeline.hpp"

namespace filmseg::commands {

namespace {

using nlohmann::json;

json kinetics_to_json(const phantom::KineticParams& k) {
    return json{{"amplitude", k.amplitude},
                {"uptake_rate", k.uptake_rate},
                {"washout_rate", k.washout_rate}};
}

phantom::KineticParams kinetics_from_json(const json& j, const phantom::KineticParams& fallback) {
    phantom::KineticParams k = fallback;
    k.amplitude = j.value("amplitude", k.amplitude);
    k.uptake_rate = j.value("uptake_rate", k.uptake_rate);
    k.washout_rate = j.value("washout_rate", k.washout_rate);
    return k;
}

std::string optimizer_name(train::Optimizer o) {
    return o == train::Optimizer::SgdNesterov ? "sgd_nesterov" : "adamw";
}

train::Optimizer optimizer_from_name(const std::string& name) {
    if (name == "sgd_nesterov") return train::Optimizer::SgdNesterov;
    if (name == "adamw") return train::Optimizer::AdamW;
    fail("config: unknown optimizer '" + name + "' (valid: sgd_nesterov, adamw)");
}

template <typename T, size_t N>
std::array<T, N> array_from_json(const json& j, const std::array<T, N>& fallback,
                                 const char* key) {
    if (!j.contains(key)) return fallback;
    const auto& a = j.at(key);
    check(a.is_array() && a.size() == N,
          std::string("config: ") + key + " must be an array of " + std::to_string(N));
    std::array<T, N> out;
    for (size_t i = 0; i < N; ++i) out[i] = a[i].get<T>();
    return out;
}

}  // namespace

void validate(const ExperimentConfig& config) {
    phantom::validate(config.phantom);
    check(config.num_cases >= 2, "config: num_cases must be at least 2 for a split");
    unet::validate(config.arch);
    train::validate(config.trainer);
    check(!config.placements.empty(), "config: placements must not be empty");
    check(config.compare_seeds > 0, "config: compare_seeds must be positive");
    check(!config.data_dir.empty(), "config: data_dir must not be empty");
    check(config.schedule.min_phases >= 3 &&
              config.schedule.max_phases >= config.schedule.min_phases,
          "config: schedule phase range must be within [3, max]");
}

ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    check(in.is_open(), "config: cannot open " + path);
    json j;
    try {
        in >> j;
    } catch (const json::parse_error& e) {
        fail("config: " + path + " is not valid JSON: " + e.what());
    }
    ExperimentConfig c;

    if (j.contains("phantom")) {
        const auto& p = j.at("phantom");
        auto& ph = c.phantom;
        ph.volume_size = array_from_json(p, ph.volume_size, "volume_size");
        ph.spacing_mm = array_from_json(p, ph.spacing_mm, "spacing_mm");
        ph.num_lesions = p.value("num_lesions", ph.num_lesions);
        ph.lesion_radius_min_mm = p.value("lesion_radius_min_mm", ph.lesion_radius_min_mm);
        ph.lesion_radius_max_mm = p.value("lesion_radius_max_mm", ph.lesion_radius_max_mm);
        ph.schedule_s = p.value("schedule_s", ph.schedule_s);
        ph.noise_sigma = p.value("noise_sigma", ph.noise_sigma);
        ph.seed = p.value("seed", ph.seed);
        if (p.contains("tissues")) {
            const auto& t = p.at("tissues");
            auto& ts = ph.tissues;
            if (t.contains("fat")) ts.fat = kinetics_from_json(t.at("fat"), ts.fat);
            if (t.contains("benign")) ts.benign = kinetics_from_json(t.at("benign"), ts.benign);
            if (t.contains("tumor")) ts.tumor = kinetics_from_json(t.at("tumor"), ts.tumor);
            ts.fat_baseline = t.value("fat_baseline", ts.fat_baseline);
            ts.benign_baseline = t.value("benign_baseline", ts.benign_baseline);
            ts.tumor_baseline = t.value("tumor_baseline", ts.tumor_baseline);
        }
    }
    if (j.contains("schedule_policy")) {
        const auto& s = j.at("schedule_policy");
        c.schedule.jitter = s.value("jitter", c.schedule.jitter);
        c.schedule.min_phases = s.value("min_phases", c.schedule.min_phases);
        c.schedule.max_phases = s.value("max_phases", c.schedule.max_phases);
        if (s.contains("clusters")) {
            c.schedule.clusters.clear();
            for (const auto& cl : s.at("clusters")) {
                phantom::ScheduleCluster sc;
                sc.first_post_min_s = cl.at("first_post_min_s").get<double>();
                sc.first_post_max_s = cl.at("first_post_max_s").get<double>();
                sc.gap_min_s = cl.at("gap_min_s").get<double>();
                sc.gap_max_s = cl.at("gap_max_s").get<double>();
                c.schedule.clusters.push_back(sc);
            }
        }
    }
    c.num_cases = j.value("num_cases", c.num_cases);
    if (j.contains("architecture")) {
        const auto& a = j.at("architecture");
        c.arch.num_classes = a.value("num_classes", c.arch.num_classes);
        c.arch.stage_channels = a.value("stage_channels", c.arch.stage_channels);
        c.arch.seed = a.value("seed", c.arch.seed);
    }
    if (j.contains("training")) {
        const auto& t = j.at("training");
        auto& tr = c.trainer;
        if (t.contains("optimizer")) {
            tr.optimizer = optimizer_from_name(t.at("optimizer").get<std::string>());
            if (tr.optimizer == train::Optimizer::AdamW) {
                // AdamW defaults differ; start from them, then apply overrides
                auto base = train::TrainConfig::adamw_defaults();
                tr.learning_rate = base.learning_rate;
                tr.weight_decay = base.weight_decay;
            }
        }
        tr.learning_rate = t.value("learning_rate", tr.learning_rate);
        tr.momentum = t.value("momentum", tr.momentum);
        tr.beta1 = t.value("beta1", tr.beta1);
        tr.beta2 = t.value("beta2", tr.beta2);
        tr.adam_epsilon = t.value("adam_epsilon", tr.adam_epsilon);
        tr.weight_decay = t.value("weight_decay", tr.weight_decay);
        tr.epochs = t.value("epochs", tr.epochs);
        tr.batches_per_epoch = t.value("batches_per_epoch", tr.batches_per_epoch);
        tr.batch_size = t.value("batch_size", tr.batch_size);
        tr.patch_size = array_from_json(t, tr.patch_size, "patch_size");
        tr.fg_probability = t.value("fg_probability", tr.fg_probability);
        tr.dice_weight = t.value("dice_weight", tr.dice_weight);
        tr.ce_weight = t.value("ce_weight", tr.ce_weight);
        tr.poly_lr_decay = t.value("poly_lr_decay", tr.poly_lr_decay);
        tr.val_max_cases = t.value("val_max_cases", tr.val_max_cases);
        tr.seed = t.value("seed", tr.seed);
    }
    if (j.contains("placements")) {
        c.placements.clear();
        for (const auto& name : j.at("placements")) {
            c.placements.push_back(unet::placement_from_string(name.get<std::string>()));
        }
    }
    c.compare_seeds = j.value("compare_seeds", c.compare_seeds);
    c.data_dir = j.value("data_dir", c.data_dir);
    validate(c);
    return c;
}

void save_config(const std::string& path, const ExperimentConfig& c) {
    const auto& ph = c.phantom;
    const auto& ts = ph.tissues;
    json j;
    j["phantom"] = {
        {"volume_size", ph.volume_size},
        {"spacing_mm", ph.spacing_mm},
        {"num_lesions", ph.num_lesions},
        {"lesion_radius_min_mm", ph.lesion_radius_min_mm},
        {"lesion_radius_max_mm", ph.lesion_radius_max_mm},
        {"schedule_s", ph.schedule_s},
        {"noise_sigma", ph.noise_sigma},
        {"seed", ph.seed},
        {"tissues",
         {{"fat", kinetics_to_json(ts.fat)},
          {"benign", kinetics_to_json(ts.benign)},
          {"tumor", kinetics_to_json(ts.tumor)},
          {"fat_baseline", ts.fat_baseline},
          {"benign_baseline", ts.benign_baseline},
          {"tumor_baseline", ts.tumor_baseline}}},
    };
    json clusters = json::array();
    for (const auto& cl : c.schedule.clusters.empty() ? phantom::default_schedule_clusters()
                                                      : c.schedule.clusters) {
        clusters.push_back({{"first_post_min_s", cl.first_post_min_s},
                            {"first_post_max_s", cl.first_post_max_s},
                            {"gap_min_s", cl.gap_min_s},
                            {"gap_max_s", cl.gap_max_s}});
    }
    j["schedule_policy"] = {{"jitter", c.schedule.jitter},
                            {"min_phases", c.schedule.min_phases},
                            {"max_phases", c.schedule.max_phases},
                            {"clusters", clusters}};
    j["num_cases"] = c.num_cases;
    j["architecture"] = {{"num_classes", c.arch.num_classes},
                         {"stage_channels", c.arch.stage_channels},
                         {"seed", c.arch.seed}};
    const auto& tr = c.trainer;
    j["training"] = {{"optimizer", optimizer_name(tr.optimizer)},
                     {"learning_rate", tr.learning_rate},
                     {"momentum", tr.momentum},
                     {"beta1", tr.beta1},
                     {"beta2", tr.beta2},
                     {"adam_epsilon", tr.adam_epsilon},
                     {"weight_decay", tr.weight_decay},
                     {"epochs", tr.epochs},
                     {"batches_per_epoch", tr.batches_per_epoch},
                     {"batch_size", tr.batch_size},
                     {"patch_size", tr.patch_size},
                     {"fg_probability", tr.fg_probability},
                     {"dice_weight", tr.dice_weight},
                     {"ce_weight", tr.ce_weight},
                     {"poly_lr_decay", tr.poly_lr_decay},
                     {"val_max_cases", tr.val_max_cases},
                     {"seed", tr.seed}};
    json placements = json::array();
    for (auto p : c.placements) placements.push_back(unet::placement_name(p));
    j["placements"] = placements;
    j["compare_seeds"] = c.compare_seeds;
    j["data_dir"] = c.data_dir;

    std::ofstream out(path);
    check(out.is_open(), "config: cannot open " + path + " for writing");
    out << j.dump(2) << '\n';
    check(out.good(), "config: write to " + path + " failed");
}

GenerateSummary run_generate(const ExperimentConfig& config, uint64_t seed,
                             const std::string& out_dir) {
    validate(config);
    const std::string dir = out_dir.empty() ? config.data_dir : out_dir;
    std::filesystem::create_directories(dir);
    auto studies = phantom::generate_dataset(config.phantom, config.num_cases,
                                             config.schedule, seed);
    std::vector<std::string> ids;
    for (const auto& s : studies) {
        phantom::save_study(dir, s);
        ids.push_back(s.case_id);
    }
    auto manifest = pipeline::make_split(ids, seed);
    pipeline::save_manifest(dir + "/manifest.json", manifest);
    GenerateSummary summary;
    summary.total = config.num_cases;
    summary.dir = dir;
    for (const auto& e : manifest) {
        if (e.split == "train") ++summary.train;
        else if (e.split == "val") ++summary.val;
        else ++summary.test;
    }
    return summary;
}

train::TrainResult run_train(const ExperimentConfig& config, unet::Placement placement,
                             uint64_t seed, const std::string& out_dir) {
    validate(config);
    auto arch = config.arch;
    arch.placement = placement;
    arch.seed = seed;
    auto trainer = config.trainer;
    trainer.seed = seed;
    auto manifest = pipeline::load_manifest(config.data_dir + "/manifest.json");
    return train::train(config.data_dir, manifest, arch, trainer, out_dir);
}

metrics::MetricsReport run_evaluate(const ExperimentConfig& config,
                                    const unet::ModelParams& model,
                                    const std::string& report_path) {
    auto manifest = pipeline::load_manifest(config.data_dir + "/manifest.json");
    auto test_ids = pipeline::split_ids(manifest, "test");
    check(!test_ids.empty(), "evaluate: empty test split");
    std::vector<metrics::CasePrediction> cases;
    for (const auto& id : test_ids) {
        auto study = phantom::load_study(config.data_dir, id);
        check(!study.truth_mask.empty(), "evaluate: case " + id + " has no truth mask");
        metrics::CasePrediction cp;
        cp.case_id = id;
        cp.truth.data = study.truth_mask;
        cp.truth.shape = study.phases[0].shape();
        cp.truth.spacing_mm = study.spacing_mm;
        cp.predicted = unet::predict_mask(model, study, config.trainer.patch_size);
        cases.push_back(std::move(cp));
    }
    auto report = metrics::evaluate_cases(cases);
    if (!report_path.empty()) save_report_csv(report_path, report);
    return report;
}

void save_report_csv(const std::string& path, const metrics::MetricsReport& report) {
    std::ofstream out(path);
    check(out.is_open(), "report: cannot open " + path + " for writing");
    out << "case_id,dice,hd95_mm\n";
    char line[160];
    for (const auto& c : report.per_case) {
        if (c.hd95.defined) {
            std::snprintf(line, sizeof line, "%s,%.9g,%.9g\n", c.case_id.c_str(), c.dice,
                          c.hd95.value_mm);
        } else {
            std::snprintf(line, sizeof line, "%s,%.9g,\n", c.case_id.c_str(), c.dice);
        }
        out << line;
    }
    check(out.good(), "report: write to " + path + " failed");
}

namespace {

struct MeanSd {
    double mean = 0.0, sd = 0.0;
};

MeanSd mean_sd(const std::vector<double>& v) {
    MeanSd r;
    if (v.empty()) return r;
    for (double x : v) r.mean += x;
    r.mean /= static_cast<double>(v.size());
    if (v.size() < 2) return r;
    double ss = 0.0;
    for (double x : v) ss += (x - r.mean) * (x - r.mean);
    r.sd = std::sqrt(ss / static_cast<double>(v.size() - 1));
    return r;
}

}  // namespace

CompareResult run_compare(const ExperimentConfig& config, uint64_t base_seed,
                          const std::string& out_root) {
    validate(config);
    auto baseline_it = std::find(config.placements.begin(), config.placements.end(),
                                 unet::Placement::None);
    check(baseline_it != config.placements.end(),
          "compare: placements must include the unconditioned baseline (none)");

    CompareResult result;
    for (auto placement : config.placements) {
        PlacementOutcome row;
        row.placement = placement;
        for (int s = 0; s < config.compare_seeds; ++s) {
            // matched seeds: the same seed index gives every placement the
            // same backbone init and the same sampling stream
            const uint64_t run_seed =
                mix_seed(base_seed, ("run" + std::to_string(s)).c_str());
            std::string run_dir;
            if (!out_root.empty()) {
                run_dir = out_root + "/" + unet::placement_name(placement) + "_seed" +
                          std::to_string(s);
            }
            auto trained = run_train(config, placement, run_seed, run_dir);
            auto report = run_evaluate(config, trained.best_model,
                                       run_dir.empty() ? "" : run_dir + "/report.csv");
            row.seed_mean_dice.push_back(report.mean_dice);
            row.seed_dice10.push_back(report.dice10);
            row.seed_mean_hd95.push_back(report.mean_hd95);
            for (const auto& c : report.per_case) row.case_dice.push_back(c.dice);
        }
        result.rows.push_back(std::move(row));
    }

    const size_t base_idx =
        static_cast<size_t>(baseline_it - config.placements.begin());
    const auto& base_dice = result.rows[base_idx].case_dice;
    for (auto& row : result.rows) {
        if (row.placement == unet::Placement::None) continue;
        auto t = metrics::paired_ttest(row.case_dice, base_dice);
        row.p_vs_baseline = t.p;
        row.significant = t.p < 0.05;
    }

    char line[256];
    std::string table =
        "placement    dice (mean+/-sd)    dice10 (mean+/-sd)  hd95_mm (mean+/-sd) p vs none\n";
    for (const auto& row : result.rows) {
        auto d = mean_sd(row.seed_mean_dice);
        auto d10 = mean_sd(row.seed_dice10);
        auto hd = mean_sd(row.seed_mean_hd95);
        if (row.placement == unet::Placement::None) {
            std::snprintf(line, sizeof line, "%-12s %6.4f +/- %6.4f   %6.4f +/- %6.4f   %7.3f +/- %6.3f          -\n",
                          unet::placement_name(row.placement).c_str(), d.mean, d.sd, d10.mean,
                          d10.sd, hd.mean, hd.sd);
        } else {
            std::snprintf(line, sizeof line, "%-12s %6.4f +/- %6.4f   %6.4f +/- %6.4f   %7.3f +/- %6.3f   %8.4f%s\n",
                          unet::placement_name(row.placement).c_str(), d.mean, d.sd, d10.mean,
                          d10.sd, hd.mean, hd.sd, row.p_vs_baseline,
                          row.significant ? " *" : "");
        }
        table += line;
    }
    result.table = table;
    if (!out_root.empty()) {
        std::filesystem::create_directories(out_root);
        std::ofstream out(out_root + "/comparison.txt");
        check(out.is_open(), "compare: cannot write summary table");
        out << table;
    }
    return result;
}

namespace {

int apply_thread_options(int threads_flag) {
    if (threads_flag > 0) {
        set_thread_count(threads_flag);
        return threads_flag;
    }
    if (const char* env = std::getenv("FILMSEG_THREADS")) {
        char* end = nullptr;
        long n = std::strtol(env, &end, 10);
        if (end != env && *end == '\0' && n > 0) set_thread_count(static_cast<int>(n));
    }
    return thread_count();
}

ExperimentConfig config_or_default(const std::string& path) {
    if (path.empty()) return ExperimentConfig{};
    return load_config(path);
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
    CLI::App app{"acquisition-time conditioned tumor segmentation workbench"};
    app.require_subcommand(1);

    std::string config_path, placement_name, out_dir;
    uint64_t seed = 0;
    int threads = 0;
    auto* config_opt = app.add_option("--config", config_path, "experiment config JSON");
    auto* placement_opt =
        app.add_option("--placement", placement_name, "conditioning placement name");
    auto* seed_opt = app.add_option("--seed", seed, "run seed");
    app.add_option("--out", out_dir, "output directory");
    app.add_option("--threads", threads, "worker thread count")->check(CLI::PositiveNumber);
    (void)config_opt;

    auto* cmd_generate = app.add_subcommand("generate", "synthesize a dataset and manifest");
    auto* cmd_train = app.add_subcommand("train", "train one placement");
    auto* cmd_evaluate = app.add_subcommand("evaluate", "score a run's best checkpoint "
                                                        "on the test split");
    auto* cmd_compare =
        app.add_subcommand("compare", "train and score every placement with matched seeds");
    auto* cmd_gradcheck =
        app.add_subcommand("gradcheck", "finite-difference audit of all gradients");
    for (auto* sub : {cmd_generate, cmd_train, cmd_evaluate, cmd_compare, cmd_gradcheck}) {
        sub->fallthrough();
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        apply_thread_options(threads);

        unet::Placement placement = unet::Placement::None;
        if (*placement_opt) {
            try {
                placement = unet::placement_from_string(placement_name);
            } catch (const std::invalid_argument& e) {
                std::cerr << e.what() << "\n";
                return 2;
            }
        }

        if (*cmd_generate) {
            auto config = config_or_default(config_path);
            uint64_t gen_seed = *seed_opt ? seed : config.phantom.seed;
            auto summary = run_generate(config, gen_seed, out_dir);
            std::printf("generated %d cases into %s (train %d / val %d / test %d)\n",
                        summary.total, summary.dir.c_str(), summary.train, summary.val,
                        summary.test);
            return 0;
        }
        if (*cmd_train) {
            if (!*placement_opt) {
                std::cerr << "train: --placement is required\n";
                return 2;
            }
            auto config = config_or_default(config_path);
            uint64_t run_seed = *seed_opt ? seed : config.trainer.seed;
            std::string run_dir = out_dir.empty()
                                      ? "runs/" + unet::placement_name(placement) + "_seed" +
                                            std::to_string(run_seed)
                                      : out_dir;
            auto result = run_train(config, placement, run_seed, run_dir);
            std::printf("trained %s: best val dice %.4f at epoch %d, artifacts in %s\n",
                        unet::placement_name(placement).c_str(), result.best_val_dice,
                        result.best_epoch, run_dir.c_str());
            return 0;
        }
        if (*cmd_evaluate) {
            if (out_dir.empty()) {
                std::cerr << "evaluate: --out must name a run directory with best.ckpt\n";
                return 2;
            }
            auto config = config_or_default(config_path);
            auto loaded = unet::load_checkpoint(out_dir + "/best.ckpt");
            auto report = run_evaluate(config, loaded.model, out_dir + "/report.csv");
            std::printf("evaluated %zu cases: mean dice %.4f, dice10 %.4f, mean hd95 %.3f mm "
                        "(%d cases defined)\n",
                        report.per_case.size(), report.mean_dice, report.dice10,
                        report.mean_hd95, report.hd95_defined_cases);
            return 0;
        }
        if (*cmd_compare) {
            auto config = config_or_default(config_path);
            uint64_t base_seed = *seed_opt ? seed : config.trainer.seed;
            std::string root = out_dir.empty() ? "runs" : out_dir;
            auto result = run_compare(config, base_seed, root);
            std::fputs(result.table.c_str(), stdout);
            return 0;
        }
        if (*cmd_gradcheck) {
            uint64_t gc_seed = *seed_opt ? seed : 2024;
            auto suite = gradient_check_suite(gc_seed);
            bool all_pass = true;
            size_t checked = 0;
            for (const auto& r : suite) {
                bool ok = r.pass(1e-3);
                all_pass = all_pass && ok;
                checked += r.checked;
                std::printf("%-22s max rel %.3e  (%zu checked, %zu skipped)  %s\n",
                            r.name.c_str(), r.max_rel_error, r.checked, r.skipped,
                            ok ? "ok" : "FAIL");
            }
            std::printf("%zu coordinates checked\n", checked);
            return all_pass ? 0 : 1;
        }
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace filmseg::commands
