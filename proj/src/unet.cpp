#include "filmseg/unet.hpp"

#include <json.hpp>

#include <cmath>
#include <cstring>
#include <fstream>
#include <random>

#include "filmseg/common.hpp"
#include "filmseg/pipeline.hpp"

namespace filmseg::unet {

Placement placement_from_string(const std::string& name) {
    if (name == "none") return Placement::None;
    if (name == "encoder") return Placement::Encoder;
    if (name == "decoder") return Placement::Decoder;
    if (name == "bottleneck") return Placement::Bottleneck;
    if (name == "all") return Placement::All;
    fail("unknown placement '" + name + "'; valid: none, encoder, decoder, bottleneck, all");
}

std::string placement_name(Placement p) {
    switch (p) {
        case Placement::None: return "none";
        case Placement::Encoder: return "encoder";
        case Placement::Decoder: return "decoder";
        case Placement::Bottleneck: return "bottleneck";
        case Placement::All: return "all";
    }
    fail("placement_name: invalid enum value");
}

const std::vector<Placement>& all_placements() {
    static const std::vector<Placement> v = {Placement::None, Placement::Encoder,
                                             Placement::Decoder, Placement::Bottleneck,
                                             Placement::All};
    return v;
}

void validate(const ArchitectureConfig& config) {
    check(config.in_channels == 3,
          "ArchitectureConfig: in_channels must be 3 (pre, first-post, later-post)");
    check(config.num_classes >= 2, "ArchitectureConfig: num_classes must be >= 2");
    check(config.depth() >= 2, "ArchitectureConfig: need at least 2 stages");
    for (size_t i = 0; i < config.stage_channels.size(); ++i) {
        check(config.stage_channels[i] >= 1, "ArchitectureConfig: stage channels must be >= 1");
        if (i > 0)
            check(config.stage_channels[i] > config.stage_channels[i - 1],
                  "ArchitectureConfig: stage_channels must be strictly increasing");
    }
}

std::vector<std::string> active_site_ids(const ArchitectureConfig& config) {
    const int d = config.depth();
    const Placement p = config.placement;
    std::vector<std::string> ids;
    auto want = [&](Placement group) { return p == group || p == Placement::All; };
    if (want(Placement::Encoder))
        for (int i = 0; i < d; ++i) ids.push_back("enc" + std::to_string(i));
    if (want(Placement::Bottleneck)) ids.push_back("bottleneck");
    if (want(Placement::Decoder))
        for (int i = d - 1; i >= 0; --i) ids.push_back("dec" + std::to_string(i));
    return ids;
}

namespace {

Tensor he_conv(std::mt19937_64& rng, Shape shape) {
    int fan_in = shape[1] * shape[2] * shape[3] * shape[4];
    std::normal_distribution<float> nd(0.0f, std::sqrt(2.0f / float(fan_in)));
    Tensor t = Tensor::zeros(std::move(shape));
    for (float& v : t.value()) v = nd(rng);
    return t;
}

ConvBlock make_block(std::mt19937_64& rng, int cin, int cout) {
    ConvBlock b;
    b.w = he_conv(rng, {cout, cin, 3, 3, 3});
    b.b = Tensor::zeros({cout});
    b.gain = Tensor::full({cout}, 1.0f);
    b.shift = Tensor::zeros({cout});
    return b;
}

int site_channels(const ArchitectureConfig& config, const std::string& id) {
    if (id == "bottleneck") return config.bottleneck_channels();
    int stage = std::stoi(id.substr(3));
    return config.stage_channels[size_t(stage)];
}

}  // namespace

ModelParams build_model(const ArchitectureConfig& config) {
    validate(config);
    ModelParams m;
    m.config = config;
    const int d = config.depth();
    const auto& sc = config.stage_channels;

    // One stream for the whole backbone, drawn in canonical order, so the
    // backbone is bit-identical across placements with the same seed.
    std::mt19937_64 rng(mix_seed(config.seed, "backbone"));
    m.encoder.resize(size_t(d));
    for (int i = 0; i < d; ++i) {
        int cin = i == 0 ? config.in_channels : sc[size_t(i)];
        m.encoder[size_t(i)].c1 = make_block(rng, cin, sc[size_t(i)]);
        m.encoder[size_t(i)].c2 = make_block(rng, sc[size_t(i)], sc[size_t(i)]);
    }
    m.down.resize(size_t(d));
    for (int i = 0; i < d; ++i) {
        int cout = i + 1 < d ? sc[size_t(i) + 1] : config.bottleneck_channels();
        ConvBlock b;  // bare strided conv: only w/b are used
        b.w = he_conv(rng, {cout, sc[size_t(i)], 2, 2, 2});
        b.b = Tensor::zeros({cout});
        m.down[size_t(i)] = std::move(b);
    }
    int bc = config.bottleneck_channels();
    m.bottleneck.c1 = make_block(rng, bc, bc);
    m.bottleneck.c2 = make_block(rng, bc, bc);
    m.up.resize(size_t(d));
    for (int i = 0; i < d; ++i) {
        int cin = i + 1 < d ? sc[size_t(i) + 1] : bc;
        UpParams u;
        u.w = he_conv(rng, {cin, sc[size_t(i)], 2, 2, 2});
        u.b = Tensor::zeros({sc[size_t(i)]});
        m.up[size_t(i)] = std::move(u);
    }
    m.decoder.resize(size_t(d));
    for (int i = 0; i < d; ++i) {
        m.decoder[size_t(i)].c1 = make_block(rng, 2 * sc[size_t(i)], sc[size_t(i)]);
        m.decoder[size_t(i)].c2 = make_block(rng, sc[size_t(i)], sc[size_t(i)]);
    }
    m.final_w = he_conv(rng, {config.num_classes, sc[0], 1, 1, 1});
    m.final_b = Tensor::zeros({config.num_classes});

    for (const std::string& id : active_site_ids(config)) {
        std::mt19937_64 site_rng(mix_seed(config.seed, id.c_str()));
        m.film_sites.push_back({id, film::make_generator(site_channels(config, id), site_rng)});
    }
    return m;
}

std::vector<Tensor> parameters(const ModelParams& model) {
    std::vector<Tensor> ps;
    auto push_block = [&](const ConvBlock& b) {
        ps.push_back(b.w);
        ps.push_back(b.b);
        if (b.gain.defined()) {
            ps.push_back(b.gain);
            ps.push_back(b.shift);
        }
    };
    for (const StageParams& s : model.encoder) {
        push_block(s.c1);
        push_block(s.c2);
    }
    for (const ConvBlock& b : model.down) push_block(b);
    push_block(model.bottleneck.c1);
    push_block(model.bottleneck.c2);
    for (const UpParams& u : model.up) {
        ps.push_back(u.w);
        ps.push_back(u.b);
    }
    for (const StageParams& s : model.decoder) {
        push_block(s.c1);
        push_block(s.c2);
    }
    ps.push_back(model.final_w);
    ps.push_back(model.final_b);
    for (const FilmSite& site : model.film_sites) {
        ps.push_back(site.gen.w1);
        ps.push_back(site.gen.b1);
        ps.push_back(site.gen.w2);
        ps.push_back(site.gen.b2);
    }
    return ps;
}

void set_requires_grad(ModelParams& model, bool rg) {
    for (Tensor p : parameters(model)) p.set_requires_grad(rg);
}

namespace {

Tensor conv_block(Tape* tape, const Tensor& x, const ConvBlock& b) {
    Conv3dSpec spec;
    spec.padding = {1, 1, 1};
    return leaky_relu(tape, instance_norm(tape, conv3d(tape, x, b.w, b.b, spec), b.gain, b.shift));
}

Tensor down_conv(Tape* tape, const Tensor& x, const ConvBlock& b) {
    // kernel 2 / stride 2 / no padding: exact halving of even extents
    Conv3dSpec spec;
    spec.stride = {2, 2, 2};
    return conv3d(tape, x, b.w, b.b, spec);
}

const FilmSite* find_site(const ModelParams& m, const std::string& id) {
    for (const FilmSite& s : m.film_sites)
        if (s.id == id) return &s;
    return nullptr;
}

Tensor maybe_modulate(Tape* tape, const ModelParams& m, const std::string& id, const Tensor& x,
                      const film::TimeVector& t) {
    const FilmSite* site = find_site(m, id);
    if (!site) return x;
    return film::modulate(tape, x, film::generate_coefficients(tape, t, site->gen));
}

}  // namespace

Tensor forward(Tape* tape, const ModelParams& model, const Tensor& input,
               const film::TimeVector& t) {
    const ArchitectureConfig& cfg = model.config;
    const int d = cfg.depth();
    check(input.ndim() == 5, "forward: input must be [N,C,D,H,W]");
    check(input.dim(1) == cfg.in_channels,
          "forward: input has " + std::to_string(input.dim(1)) + " channels, model expects " +
              std::to_string(cfg.in_channels));
    const int div = 1 << d;
    for (int a = 2; a < 5; ++a) {
        if (input.dim(a) % div != 0) {
            fail("forward: spatial axis " + std::to_string(a - 2) + " has size " +
                 std::to_string(input.dim(a)) + ", must be divisible by " + std::to_string(div) +
                 " (2^depth)");
        }
    }
    film::validate(t);

    std::vector<Tensor> skips(static_cast<size_t>(d));
    Tensor x = input;
    for (int i = 0; i < d; ++i) {
        x = conv_block(tape, x, model.encoder[size_t(i)].c1);
        x = conv_block(tape, x, model.encoder[size_t(i)].c2);
        x = maybe_modulate(tape, model, "enc" + std::to_string(i), x, t);
        skips[size_t(i)] = x;  // the modulated map feeds the skip
        x = down_conv(tape, x, model.down[size_t(i)]);
    }
    x = conv_block(tape, x, model.bottleneck.c1);
    x = conv_block(tape, x, model.bottleneck.c2);
    x = maybe_modulate(tape, model, "bottleneck", x, t);
    for (int i = d - 1; i >= 0; --i) {
        x = transposed_conv3d(tape, x, model.up[size_t(i)].w, model.up[size_t(i)].b, {2, 2, 2});
        x = concat_channels(tape, x, skips[size_t(i)]);
        x = conv_block(tape, x, model.decoder[size_t(i)].c1);
        x = conv_block(tape, x, model.decoder[size_t(i)].c2);
        x = maybe_modulate(tape, model, "dec" + std::to_string(i), x, t);
    }
    return conv3d(tape, x, model.final_w, model.final_b, Conv3dSpec{});
}

namespace {

constexpr char kMagic[4] = {'F', 'S', 'E', 'G'};
constexpr uint32_t kVersion = 1;

}  // namespace

namespace {

// Window starts covering [0, n) with stride = window: full steps, then one
// window clamped flush to the far edge (dropped if it repeats the last).
std::vector<int> window_starts(int n, int window) {
    std::vector<int> starts;
    for (int s = 0;; s += window) {
        if (s + window >= n) {
            starts.push_back(n - window);
            break;
        }
        starts.push_back(s);
    }
    return starts;
}

}  // namespace

metrics::SegmentationMask predict_mask(const ModelParams& model,
                                       const phantom::DceStudy& study,
                                       const std::array<int, 3>& patch_size) {
    phantom::validate(study);
    check(model.config.num_classes == 2, "predict_mask: expects a binary segmentation head");
    const auto& vol_shape = study.phases[0].shape();
    const int vd = vol_shape[0], vh = vol_shape[1], vw = vol_shape[2];
    const int pd = patch_size[0], ph = patch_size[1], pw = patch_size[2];
    check(pd > 0 && ph > 0 && pw > 0, "predict_mask: patch size must be positive");
    check(pd <= vd && ph <= vh && pw <= vw,
          "predict_mask: patch must fit inside the volume");

    auto normalized = pipeline::normalize_study(study);
    const film::TimeVector times{study.times_s[0], study.times_s[1], study.times_s[2]};

    // Per-voxel probability sums. Every window covering a voxel adds both
    // class probabilities, so comparing the sums is the same as comparing
    // the per-voxel averages.
    const size_t voxels = static_cast<size_t>(vd) * vh * vw;
    std::vector<double> bg_sum(voxels, 0.0), fg_sum(voxels, 0.0);

    Tensor input = Tensor::zeros({1, 3, pd, ph, pw});
    auto in = input.value();
    for (int sz : window_starts(vd, pd)) {
        for (int sy : window_starts(vh, ph)) {
            for (int sx : window_starts(vw, pw)) {
                for (int k = 0; k < 3; ++k) {
                    auto phase = normalized.phases[static_cast<size_t>(k)].value();
                    for (int z = 0; z < pd; ++z) {
                        for (int y = 0; y < ph; ++y) {
                            const size_t src =
                                (static_cast<size_t>(sz + z) * vh + (sy + y)) * vw + sx;
                            const size_t dst =
                                ((static_cast<size_t>(k) * pd + z) * ph + y) * pw;
                            std::memcpy(in.data() + dst, phase.data() + src,
                                        static_cast<size_t>(pw) * sizeof(float));
                        }
                    }
                }
                Tensor logits = forward(nullptr, model, input, times);
                Tensor probs = softmax_channel(nullptr, logits);
                auto pv = probs.value();
                const size_t plane = static_cast<size_t>(pd) * ph * pw;
                for (int z = 0; z < pd; ++z) {
                    for (int y = 0; y < ph; ++y) {
                        for (int x = 0; x < pw; ++x) {
                            const size_t local = (static_cast<size_t>(z) * ph + y) * pw + x;
                            const size_t global =
                                (static_cast<size_t>(sz + z) * vh + (sy + y)) * vw +
                                (sx + x);
                            bg_sum[global] += pv[local];
                            fg_sum[global] += pv[plane + local];
                        }
                    }
                }
            }
        }
    }

    metrics::SegmentationMask mask;
    mask.shape = {vd, vh, vw};
    mask.spacing_mm = study.spacing_mm;
    mask.data.resize(voxels);
    for (size_t i = 0; i < voxels; ++i) mask.data[i] = fg_sum[i] > bg_sum[i] ? 1 : 0;
    return mask;
}

void save_checkpoint(const std::string& path, const ModelParams& model, int epoch) {
    nlohmann::json header;
    header["in_channels"] = model.config.in_channels;
    header["num_classes"] = model.config.num_classes;
    header["stage_channels"] = model.config.stage_channels;
    header["placement"] = placement_name(model.config.placement);
    header["seed"] = model.config.seed;
    header["epoch"] = epoch;
    std::string hs = header.dump();

    std::ofstream out(path, std::ios::binary);
    check(out.good(), "save_checkpoint: cannot open '" + path + "' for writing");
    out.write(kMagic, 4);
    uint32_t version = kVersion;
    out.write(reinterpret_cast<const char*>(&version), 4);
    auto hlen = uint32_t(hs.size());
    out.write(reinterpret_cast<const char*>(&hlen), 4);
    out.write(hs.data(), std::streamsize(hs.size()));
    for (const Tensor& p : parameters(model)) {
        out.write(reinterpret_cast<const char*>(p.value().data()),
                  std::streamsize(p.numel() * sizeof(float)));
    }
    check(out.good(), "save_checkpoint: write to '" + path + "' failed");
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    check(in.good(), "load_checkpoint: cannot open '" + path + "'");
    char magic[4];
    in.read(magic, 4);
    check(in.good() && std::memcmp(magic, kMagic, 4) == 0,
          "load_checkpoint: '" + path + "' is not a checkpoint file (bad magic)");
    uint32_t version = 0, hlen = 0;
    in.read(reinterpret_cast<char*>(&version), 4);
    check(in.good() && version == kVersion,
          "load_checkpoint: unsupported checkpoint version " + std::to_string(version));
    in.read(reinterpret_cast<char*>(&hlen), 4);
    check(in.good(), "load_checkpoint: truncated header");
    std::string hs(hlen, '\0');
    in.read(hs.data(), hlen);
    check(in.good(), "load_checkpoint: truncated header");

    nlohmann::json header = nlohmann::json::parse(hs);
    ArchitectureConfig config;
    config.in_channels = header.at("in_channels").get<int>();
    config.num_classes = header.at("num_classes").get<int>();
    config.stage_channels = header.at("stage_channels").get<std::vector<int>>();
    config.placement = placement_from_string(header.at("placement").get<std::string>());
    config.seed = header.at("seed").get<uint64_t>();

    LoadedCheckpoint lc;
    lc.model = build_model(config);
    lc.epoch = header.at("epoch").get<int>();
    for (Tensor p : parameters(lc.model)) {
        in.read(reinterpret_cast<char*>(p.value().data()),
                std::streamsize(p.numel() * sizeof(float)));
        check(in.gcount() == std::streamsize(p.numel() * sizeof(float)),
              "load_checkpoint: parameter blob is shorter than the architecture requires");
    }
    in.peek();
    check(in.eof(), "load_checkpoint: trailing bytes after the parameter blob");
    return lc;
}

}  // namespace filmseg::unet
