#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "filmseg/film.hpp"
#include "filmseg/metrics.hpp"
#include "filmseg/phantom.hpp"
#include "filmseg/tensor.hpp"

namespace filmseg::unet {

enum class Placement { None, Encoder, Decoder, Bottleneck, All };

/// Parses one of none|encoder|decoder|bottleneck|all (case-sensitive);
/// anything else throws, listing the valid names.
Placement placement_from_string(const std::string& name);
std::string placement_name(Placement p);
const std::vector<Placement>& all_placements();

struct ArchitectureConfig {
    int in_channels = 3;   // triplet input
    int num_classes = 2;   // background, tumor
    std::vector<int> stage_channels = {8, 16, 32};
    Placement placement = Placement::None;
    uint64_t seed = 0;

    int depth() const { return int(stage_channels.size()); }
    // the bottleneck always doubles the deepest stage width
    int bottleneck_channels() const { return 2 * stage_channels.back(); }
};

void validate(const ArchitectureConfig& config);

/// conv3x3x3(pad 1) -> instance_norm -> leaky_relu
struct ConvBlock {
    Tensor w, b;            // conv
    Tensor gain, shift;     // norm affine
};

struct StageParams {
    ConvBlock c1, c2;
};

struct UpParams {
    Tensor w, b;  // transposed conv, kernel 2, stride 2
};

struct FilmSite {
    std::string id;  // enc<i>, bottleneck, dec<i>
    film::FilmGenerator gen;
};

struct ModelParams {
    ArchitectureConfig config;
    std::vector<StageParams> encoder;  // one per depth, shallow to deep
    std::vector<ConvBlock> down;       // strided conv between levels
    StageParams bottleneck;
    std::vector<UpParams> up;          // index i feeds decoder stage i
    std::vector<StageParams> decoder;  // index i mirrors encoder stage i
    Tensor final_w, final_b;           // 1x1x1 conv to num_classes
    std::vector<FilmSite> film_sites;  // active sites in execution order
};

/// Site ids implied by the architecture, in execution order
/// (enc0..enc{d-1}, bottleneck, dec{d-1}..dec0), filtered by placement.
std::vector<std::string> active_site_ids(const ArchitectureConfig& config);

/// Deterministic init: He fan-in normal conv weights, zero biases, identity
/// norms, zero-initialized generator output layers. The backbone stream is
/// derived from the seed independently of placement, so models differing
/// only in placement share bit-identical backbone parameters; each film site
/// draws from its own site-id-derived stream.
ModelParams build_model(const ArchitectureConfig& config);

/// Every parameter tensor in canonical (checkpoint) order: encoder stages,
/// downs, bottleneck, ups, decoders, final conv, then film generators in
/// site order (w1, b1, w2, b2 each).
std::vector<Tensor> parameters(const ModelParams& model);

void set_requires_grad(ModelParams& model, bool rg);

/// Full encoder-decoder pass; spatial dims must be divisible by 2^depth.
/// Feature maps at active film sites are modulated by coefficients generated
/// from t before feeding both the skip connection and the next level.
Tensor forward(Tape* tape, const ModelParams& model, const Tensor& input,
               const film::TimeVector& t);

/// Segments a raw study: normalizes it, takes the canonical
/// [pre, first-post, second-post] triplet, and runs sliding-window
/// inference. Window starts step by the patch size with a final window
/// clamped to the volume edge; per-voxel class probabilities are averaged
/// over every window covering the voxel and the mask is the argmax
/// (foreground only on a strictly larger probability).
metrics::SegmentationMask predict_mask(const ModelParams& model,
                                       const phantom::DceStudy& study,
                                       const std::array<int, 3>& patch_size = {32, 32, 32});

void save_checkpoint(const std::string& path, const ModelParams& model, int epoch);

struct LoadedCheckpoint {
    ModelParams model;
    int epoch = 0;
};

LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace filmseg::unet
