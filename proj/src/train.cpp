#include "filmseg/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>

#include "filmseg/common.hpp"
#include "filmseg/metrics.hpp"
#include "filmseg/phantom.hpp"

namespace filmseg::train {

TrainConfig TrainConfig::adamw_defaults() {
    TrainConfig c;
    c.optimizer = Optimizer::AdamW;
    c.learning_rate = 1e-3f;
    c.weight_decay = 1e-2f;
    return c;
}

void validate(const TrainConfig& c) {
    check(c.learning_rate > 0.0f && std::isfinite(c.learning_rate),
          "train config: learning rate must be positive");
    check(c.momentum >= 0.0f && c.momentum < 1.0f, "train config: momentum must be in [0,1)");
    check(c.beta1 >= 0.0f && c.beta1 < 1.0f && c.beta2 >= 0.0f && c.beta2 < 1.0f,
          "train config: betas must be in [0,1)");
    check(c.adam_epsilon > 0.0f, "train config: adam epsilon must be positive");
    check(c.weight_decay >= 0.0f, "train config: weight decay must be non-negative");
    check(c.epochs > 0, "train config: epochs must be positive");
    check(c.batches_per_epoch > 0, "train config: batches per epoch must be positive");
    check(c.batch_size > 0, "train config: batch size must be positive");
    for (int p : c.patch_size) check(p > 0, "train config: patch size must be positive");
    check(c.fg_probability >= 0.0f && c.fg_probability <= 1.0f,
          "train config: foreground probability must be in [0,1]");
    check(c.dice_weight >= 0.0f && c.ce_weight >= 0.0f,
          "train config: loss weights must be non-negative");
    check(c.dice_weight + c.ce_weight > 0.0f, "train config: at least one loss weight "
                                              "must be positive");
    check(c.val_max_cases >= 0, "train config: val_max_cases must be non-negative");
}

namespace {

int label_at(std::span<const float> target, size_t i, int num_classes, const char* who) {
    float v = target[i];
    int lab = static_cast<int>(v);
    check(static_cast<float>(lab) == v && lab >= 0 && lab < num_classes,
          std::string(who) + ": target labels must be integers in [0, C)");
    return lab;
}

}  // namespace

Tensor soft_dice_loss(Tape* tape, const Tensor& probs, const Tensor& target, float epsilon) {
    check(probs.defined() && target.defined(), "soft_dice: undefined input");
    check(probs.ndim() == 5 && probs.dim(1) == 2,
          "soft_dice: probabilities must be [N,2,D,H,W]");
    check(target.ndim() == 4, "soft_dice: target must be [N,D,H,W]");
    check(epsilon > 0.0f, "soft_dice: epsilon must be positive");
    const int n = probs.dim(0);
    check(target.dim(0) == n && target.dim(1) == probs.dim(2) &&
              target.dim(2) == probs.dim(3) && target.dim(3) == probs.dim(4),
          "soft_dice: target shape does not match probabilities");
    const size_t vox = static_cast<size_t>(probs.dim(2)) * probs.dim(3) * probs.dim(4);

    auto pv = probs.value();
    auto tv = target.value();
    std::vector<double> inter(static_cast<size_t>(n)), denom(static_cast<size_t>(n));
    double mean_dice = 0.0;
    for (int s = 0; s < n; ++s) {
        const size_t fg_off = (static_cast<size_t>(s) * 2 + 1) * vox;
        const size_t t_off = static_cast<size_t>(s) * vox;
        double isum = 0.0, psum = 0.0, ysum = 0.0;
        for (size_t i = 0; i < vox; ++i) {
            const double p = pv[fg_off + i];
            const double y = label_at(tv, t_off + i, 2, "soft_dice");
            isum += p * y;
            psum += p;
            ysum += y;
        }
        inter[static_cast<size_t>(s)] = isum;
        denom[static_cast<size_t>(s)] = psum + ysum;
        mean_dice += (2.0 * isum + epsilon) / (denom[static_cast<size_t>(s)] + epsilon);
    }
    mean_dice /= n;
    Tensor out = Tensor::scalar(static_cast<float>(1.0 - mean_dice));

    if (tape && probs.requires_grad()) {
        Tensor p_t = probs, t_t = target, out_t = out;
        float eps = epsilon;
        out.set_requires_grad(true);
        tape->record("soft_dice_loss", out, [p_t, t_t, out_t, inter, denom, eps,
                                             n, vox]() mutable {
            const float g = out_t.grad()[0];
            auto pg = p_t.grad();
            auto tv2 = t_t.value();
            for (int s = 0; s < n; ++s) {
                const size_t fg_off = (static_cast<size_t>(s) * 2 + 1) * vox;
                const size_t t_off = static_cast<size_t>(s) * vox;
                const double se = denom[static_cast<size_t>(s)] + eps;
                const double num = 2.0 * inter[static_cast<size_t>(s)] + eps;
                for (size_t i = 0; i < vox; ++i) {
                    const double y = tv2[t_off + i];
                    // d(1 - dice_s)/dp = -(2y*se - num) / se^2, averaged over samples
                    const double d = -(2.0 * y * se - num) / (se * se) / n;
                    pg[fg_off + i] += static_cast<float>(d * g);
                }
            }
        });
    }
    return out;
}

Tensor cross_entropy_loss(Tape* tape, const Tensor& logits, const Tensor& target) {
    check(logits.defined() && target.defined(), "cross_entropy: undefined input");
    check(logits.ndim() == 5, "cross_entropy: logits must be [N,C,D,H,W]");
    check(target.ndim() == 4, "cross_entropy: target must be [N,D,H,W]");
    const int n = logits.dim(0), c = logits.dim(1);
    check(c >= 2, "cross_entropy: needs at least two classes");
    check(target.dim(0) == n && target.dim(1) == logits.dim(2) &&
              target.dim(2) == logits.dim(3) && target.dim(3) == logits.dim(4),
          "cross_entropy: target shape does not match logits");
    const size_t vox = static_cast<size_t>(logits.dim(2)) * logits.dim(3) * logits.dim(4);
    const size_t count = static_cast<size_t>(n) * vox;

    auto lv = logits.value();
    auto tv = target.value();
    double total = 0.0;
    for (int s = 0; s < n; ++s) {
        const size_t base = static_cast<size_t>(s) * c * vox;
        const size_t t_off = static_cast<size_t>(s) * vox;
        for (size_t i = 0; i < vox; ++i) {
            const int lab = label_at(tv, t_off + i, c, "cross_entropy");
            double mx = lv[base + i];
            for (int ch = 1; ch < c; ++ch)
                mx = std::max(mx, static_cast<double>(lv[base + static_cast<size_t>(ch) * vox + i]));
            double sum = 0.0;
            for (int ch = 0; ch < c; ++ch)
                sum += std::exp(lv[base + static_cast<size_t>(ch) * vox + i] - mx);
            const double lse = mx + std::log(sum);
            total += lse - lv[base + static_cast<size_t>(lab) * vox + i];
        }
    }
    Tensor out = Tensor::scalar(static_cast<float>(total / static_cast<double>(count)));

    if (tape && logits.requires_grad()) {
        Tensor l_t = logits, t_t = target, out_t = out;
        out.set_requires_grad(true);
        tape->record("cross_entropy_loss", out, [l_t, t_t, out_t, n, c, vox,
                                                 count]() mutable {
            const float g = out_t.grad()[0];
            auto lg = l_t.grad();
            auto lv2 = l_t.value();
            auto tv2 = t_t.value();
            const double inv = 1.0 / static_cast<double>(count);
            for (int s = 0; s < n; ++s) {
                const size_t base = static_cast<size_t>(s) * c * vox;
                const size_t t_off = static_cast<size_t>(s) * vox;
                for (size_t i = 0; i < vox; ++i) {
                    const int lab = static_cast<int>(tv2[t_off + i]);
                    double mx = lv2[base + i];
                    for (int ch = 1; ch < c; ++ch)
                        mx = std::max(mx,
                                      static_cast<double>(
                                          lv2[base + static_cast<size_t>(ch) * vox + i]));
                    double sum = 0.0;
                    for (int ch = 0; ch < c; ++ch)
                        sum += std::exp(lv2[base + static_cast<size_t>(ch) * vox + i] - mx);
                    for (int ch = 0; ch < c; ++ch) {
                        const double soft =
                            std::exp(lv2[base + static_cast<size_t>(ch) * vox + i] - mx) / sum;
                        const double ind = ch == lab ? 1.0 : 0.0;
                        lg[base + static_cast<size_t>(ch) * vox + i] +=
                            static_cast<float>((soft - ind) * inv * g);
                    }
                }
            }
        });
    }
    return out;
}

OptimizerState make_optimizer_state(const TrainConfig& config,
                                    const std::vector<Tensor>& params) {
    validate(config);
    check(!params.empty(), "optimizer: no parameters");
    OptimizerState s;
    s.kind = config.optimizer;
    for (const auto& p : params) {
        check(p.defined(), "optimizer: undefined parameter tensor");
        if (s.kind == Optimizer::SgdNesterov) {
            s.velocity.emplace_back(p.numel(), 0.0f);
        } else {
            s.m.emplace_back(p.numel(), 0.0f);
            s.v.emplace_back(p.numel(), 0.0f);
        }
    }
    return s;
}

void optimizer_step(const TrainConfig& config, OptimizerState& state,
                    std::vector<Tensor>& params, float lr) {
    check(lr > 0.0f && std::isfinite(lr), "optimizer: learning rate must be positive");
    const size_t n = params.size();
    if (state.kind == Optimizer::SgdNesterov) {
        check(state.velocity.size() == n, "optimizer: state does not match parameters");
        const float mu = config.momentum, wd = config.weight_decay;
        for (size_t j = 0; j < n; ++j) {
            auto pv = params[j].value();
            auto pg = params[j].grad();
            auto& vel = state.velocity[j];
            check(vel.size() == pv.size(), "optimizer: state does not match parameters");
            for (size_t i = 0; i < pv.size(); ++i) {
                const float g = pg[i] + wd * pv[i];
                vel[i] = mu * vel[i] - lr * g;
                // Nesterov look-ahead: apply the velocity plus one more
                // gradient step from the post-velocity point
                pv[i] += mu * vel[i] - lr * g;
            }
        }
    } else {
        check(state.m.size() == n && state.v.size() == n,
              "optimizer: state does not match parameters");
        state.step += 1;
        const double bc1 = 1.0 - std::pow(static_cast<double>(config.beta1), state.step);
        const double bc2 = 1.0 - std::pow(static_cast<double>(config.beta2), state.step);
        const float b1 = config.beta1, b2 = config.beta2, eps = config.adam_epsilon;
        const float decay = 1.0f - lr * config.weight_decay;
        for (size_t j = 0; j < n; ++j) {
            auto pv = params[j].value();
            auto pg = params[j].grad();
            auto& m = state.m[j];
            auto& v = state.v[j];
            check(m.size() == pv.size(), "optimizer: state does not match parameters");
            for (size_t i = 0; i < pv.size(); ++i) {
                pv[i] *= decay;  // decoupled weight decay
                const float g = pg[i];
                m[i] = b1 * m[i] + (1.0f - b1) * g;
                v[i] = b2 * v[i] + (1.0f - b2) * g * g;
                const double mhat = m[i] / bc1;
                const double vhat = v[i] / bc2;
                pv[i] -= static_cast<float>(lr * mhat / (std::sqrt(vhat) + eps));
            }
        }
    }
}

namespace {

constexpr char kOptMagic[4] = {'F', 'O', 'P', 'T'};

void write_buffers(std::ofstream& out, const std::vector<std::vector<float>>& bufs) {
    uint64_t n = bufs.size();
    out.write(reinterpret_cast<const char*>(&n), sizeof n);
    for (const auto& b : bufs) {
        uint64_t len = b.size();
        out.write(reinterpret_cast<const char*>(&len), sizeof len);
        out.write(reinterpret_cast<const char*>(b.data()),
                  static_cast<std::streamsize>(len * sizeof(float)));
    }
}

std::vector<std::vector<float>> read_buffers(std::ifstream& in) {
    uint64_t n = 0;
    in.read(reinterpret_cast<char*>(&n), sizeof n);
    std::vector<std::vector<float>> bufs(n);
    for (auto& b : bufs) {
        uint64_t len = 0;
        in.read(reinterpret_cast<char*>(&len), sizeof len);
        b.resize(len);
        in.read(reinterpret_cast<char*>(b.data()),
                static_cast<std::streamsize>(len * sizeof(float)));
    }
    check(in.good(), "optimizer state: file truncated");
    return bufs;
}

}  // namespace

void save_optimizer_state(const std::string& path, const OptimizerState& state) {
    std::ofstream out(path, std::ios::binary);
    check(out.is_open(), "optimizer state: cannot open " + path + " for writing");
    out.write(kOptMagic, 4);
    uint8_t kind = state.kind == Optimizer::SgdNesterov ? 0 : 1;
    out.write(reinterpret_cast<const char*>(&kind), 1);
    out.write(reinterpret_cast<const char*>(&state.step), sizeof state.step);
    write_buffers(out, state.velocity);
    write_buffers(out, state.m);
    write_buffers(out, state.v);
    check(out.good(), "optimizer state: write to " + path + " failed");
}

OptimizerState load_optimizer_state(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    check(in.is_open(), "optimizer state: cannot open " + path);
    char magic[4];
    in.read(magic, 4);
    check(in.good() && std::memcmp(magic, kOptMagic, 4) == 0,
          "optimizer state: " + path + " is not an optimizer state file");
    uint8_t kind = 0;
    in.read(reinterpret_cast<char*>(&kind), 1);
    check(kind <= 1, "optimizer state: unknown optimizer kind");
    OptimizerState s;
    s.kind = kind == 0 ? Optimizer::SgdNesterov : Optimizer::AdamW;
    in.read(reinterpret_cast<char*>(&s.step), sizeof s.step);
    s.velocity = read_buffers(in);
    s.m = read_buffers(in);
    s.v = read_buffers(in);
    return s;
}

void save_history_csv(const std::string& path, const std::vector<EpochStats>& history) {
    std::ofstream out(path);
    check(out.is_open(), "history: cannot open " + path + " for writing");
    out << "epoch,train_loss,val_dice,lr\n";
    char line[160];
    for (const auto& e : history) {
        std::snprintf(line, sizeof line, "%d,%.12g,%.12g,%.12g\n", e.epoch, e.train_loss,
                      e.val_dice, e.lr);
        out << line;
    }
    check(out.good(), "history: write to " + path + " failed");
}

std::vector<EpochStats> load_history_csv(const std::string& path) {
    std::ifstream in(path);
    check(in.is_open(), "history: cannot open " + path);
    std::string line;
    check(static_cast<bool>(std::getline(in, line)) && line == "epoch,train_loss,val_dice,lr",
          "history: " + path + " is not a training history file");
    std::vector<EpochStats> out;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        EpochStats e;
        check(std::sscanf(line.c_str(), "%d,%lf,%lf,%lf", &e.epoch, &e.train_loss,
                          &e.val_dice, &e.lr) == 4,
              "history: malformed row in " + path);
        out.push_back(e);
    }
    return out;
}

namespace {

struct TrainCase {
    phantom::DceStudy normalized;
    std::vector<uint8_t> mask;
};

struct ValCase {
    phantom::DceStudy raw;
    metrics::SegmentationMask truth;
};

unet::ModelParams copy_params(const unet::ModelParams& src) {
    unet::ModelParams dst = unet::build_model(src.config);
    auto sp = unet::parameters(src);
    auto dp = unet::parameters(dst);
    for (size_t i = 0; i < sp.size(); ++i) {
        auto from = sp[i].value();
        std::copy(from.begin(), from.end(), dp[i].value().begin());
    }
    return dst;
}

double validation_dice(const unet::ModelParams& model, const std::vector<ValCase>& cases,
                       const std::array<int, 3>& patch) {
    double sum = 0.0;
    for (const auto& c : cases) {
        auto pred = unet::predict_mask(model, c.raw, patch);
        sum += metrics::dice(pred, c.truth);
    }
    return sum / static_cast<double>(cases.size());
}

}  // namespace

TrainResult train(const std::string& data_dir, const pipeline::Manifest& manifest,
                  const unet::ArchitectureConfig& arch, const TrainConfig& config,
                  const std::string& out_dir) {
    validate(config);
    unet::validate(arch);
    auto train_ids = pipeline::split_ids(manifest, "train");
    auto val_ids = pipeline::split_ids(manifest, "val");
    check(!train_ids.empty(), "train: empty train split");
    check(!val_ids.empty(), "train: empty validation split");
    if (config.val_max_cases > 0 &&
        static_cast<size_t>(config.val_max_cases) < val_ids.size()) {
        val_ids.resize(static_cast<size_t>(config.val_max_cases));
    }

    std::vector<TrainCase> train_cases;
    for (const auto& id : train_ids) {
        auto study = phantom::load_study(data_dir, id);
        check(!study.truth_mask.empty(), "train: case " + id + " has no truth mask");
        TrainCase c;
        c.mask = study.truth_mask;
        c.normalized = pipeline::normalize_study(study);
        train_cases.push_back(std::move(c));
    }
    std::vector<ValCase> val_cases;
    for (const auto& id : val_ids) {
        auto study = phantom::load_study(data_dir, id);
        check(!study.truth_mask.empty(), "train: case " + id + " has no truth mask");
        ValCase c;
        c.truth.data = study.truth_mask;
        c.truth.shape = study.phases[0].shape();
        c.truth.spacing_mm = study.spacing_mm;
        c.raw = std::move(study);
        val_cases.push_back(std::move(c));
    }

    auto model = unet::build_model(arch);
    unet::set_requires_grad(model, true);
    auto params = unet::parameters(model);
    auto opt_state = make_optimizer_state(config, params);
    std::mt19937_64 rng(mix_seed(config.seed, "sampling"));

    TrainResult result;
    result.best_val_dice = -1.0;
    const size_t samples_per_epoch =
        static_cast<size_t>(config.batches_per_epoch) * config.batch_size;

    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        const double frac = static_cast<double>(epoch) / config.epochs;
        const float lr = config.poly_lr_decay
                             ? config.learning_rate * static_cast<float>(std::pow(1.0 - frac, 0.9))
                             : config.learning_rate;
        double epoch_loss = 0.0;
        for (int b = 0; b < config.batches_per_epoch; ++b) {
            for (auto& p : params) p.zero_grad();
            for (int s = 0; s < config.batch_size; ++s) {
                const size_t ci = std::uniform_int_distribution<size_t>(
                    0, train_cases.size() - 1)(rng);
                const auto& tc = train_cases[ci];
                auto triplets = pipeline::build_triplets(tc.normalized);
                const size_t ti =
                    std::uniform_int_distribution<size_t>(0, triplets.size() - 1)(rng);
                auto sample = pipeline::sample_patch(triplets[ti], tc.mask, config.patch_size,
                                                     config.fg_probability, rng,
                                                     tc.normalized.case_id);

                auto cv = sample.channels.value();
                Tensor input = Tensor::from_data(
                    {1, 3, config.patch_size[0], config.patch_size[1], config.patch_size[2]},
                    std::vector<float>(cv.begin(), cv.end()));
                auto lv = sample.label.value();
                Tensor target = Tensor::from_data(
                    {1, config.patch_size[0], config.patch_size[1], config.patch_size[2]},
                    std::vector<float>(lv.begin(), lv.end()));

                Tape tape;
                Tensor logits = unet::forward(&tape, model, input, sample.times);
                Tensor probs = softmax_channel(&tape, logits);
                Tensor loss = add(&tape,
                                  scale(&tape, soft_dice_loss(&tape, probs, target),
                                        config.dice_weight),
                                  scale(&tape, cross_entropy_loss(&tape, logits, target),
                                        config.ce_weight));
                const double loss_value = loss.item();
                check(std::isfinite(loss_value),
                      "train: non-finite loss at epoch " + std::to_string(epoch));
                epoch_loss += loss_value;
                // batch-mean gradients: each sample contributes 1/batch_size
                Tensor scaled = scale(&tape, loss, 1.0f / config.batch_size);
                backward(tape, scaled);
            }
            optimizer_step(config, opt_state, params, lr);
        }

        EpochStats stats;
        stats.epoch = epoch;
        stats.train_loss = epoch_loss / static_cast<double>(samples_per_epoch);
        stats.val_dice = validation_dice(model, val_cases, config.patch_size);
        stats.lr = lr;
        result.history.push_back(stats);
        if (stats.val_dice > result.best_val_dice) {
            result.best_val_dice = stats.val_dice;
            result.best_epoch = epoch;
            result.best_model = copy_params(model);
        }
    }

    result.model = std::move(model);
    if (!out_dir.empty()) {
        std::filesystem::create_directories(out_dir);
        unet::save_checkpoint(out_dir + "/best.ckpt", result.best_model, result.best_epoch);
        unet::save_checkpoint(out_dir + "/last.ckpt", result.model, config.epochs - 1);
        save_history_csv(out_dir + "/history.csv", result.history);
    }
    return result;
}

}  // namespace filmseg::train
