#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "filmseg/metrics.hpp"
#include "filmseg/phantom.hpp"
#include "filmseg/train.hpp"
#include "filmseg/unet.hpp"

namespace filmseg::commands {

/// One experiment description: how to synthesize the dataset, the shared
/// backbone architecture, the training recipe, and which conditioning
/// placements a comparison sweeps.
struct ExperimentConfig {
    phantom::PhantomSpec phantom;
    phantom::SchedulePolicy schedule;
    int num_cases = 50;
    unet::ArchitectureConfig arch;   // placement is overridden per run
    train::TrainConfig trainer;
    std::vector<unet::Placement> placements{
        unet::Placement::None, unet::Placement::Encoder, unet::Placement::Decoder,
        unet::Placement::Bottleneck, unet::Placement::All};
    int compare_seeds = 3;
    std::string data_dir = "data";
};

void validate(const ExperimentConfig& config);
ExperimentConfig load_config(const std::string& path);
void save_config(const std::string& path, const ExperimentConfig& config);

struct GenerateSummary {
    int total = 0, train = 0, val = 0, test = 0;
    std::string dir;
};

/// Synthesizes the dataset into out_dir (config.data_dir when empty) and
/// writes manifest.json with the 60/20/20 split.
GenerateSummary run_generate(const ExperimentConfig& config, uint64_t seed,
                             const std::string& out_dir);

/// Trains one placement; the run seed drives both the parameter init and
/// the sampling stream. Writes checkpoints and history into out_dir unless
/// it is empty.
train::TrainResult run_train(const ExperimentConfig& config, unet::Placement placement,
                             uint64_t seed, const std::string& out_dir);

/// Scores a trained model on the manifest's test split; writes a per-case
/// CSV when report_path is nonempty.
metrics::MetricsReport run_evaluate(const ExperimentConfig& config,
                                    const unet::ModelParams& model,
                                    const std::string& report_path);

void save_report_csv(const std::string& path, const metrics::MetricsReport& report);

struct PlacementOutcome {
    unet::Placement placement = unet::Placement::None;
    std::vector<double> seed_mean_dice;  // one entry per comparison seed
    std::vector<double> seed_dice10;
    std::vector<double> seed_mean_hd95;  // averaged over defined cases
    std::vector<double> case_dice;       // per (seed, test case), pairing order
    double p_vs_baseline = 1.0;          // paired t-test against the none row
    bool significant = false;            // p < 0.05
};

struct CompareResult {
    std::vector<PlacementOutcome> rows;  // order follows config.placements
    std::string table;                   // rendered summary
};

/// Trains every configured placement with compare_seeds matched seeds (same
/// seed index = same backbone init and sampling stream across placements),
/// evaluates each best checkpoint on the test split, and runs paired
/// t-tests of per-case Dice against the unconditioned baseline.
CompareResult run_compare(const ExperimentConfig& config, uint64_t base_seed,
                          const std::string& out_root);

/// Full command-line dispatch; returns the process exit code: 0 on
/// success, 1 when a requested check or run fails, 2 on usage errors.
int run_cli(int argc, const char* const* argv);

}  // namespace filmseg::commands
