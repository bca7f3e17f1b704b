#pragma once

#include <string>
#include <vector>

#include "ditair/conditioning.hpp"
#include "ditair/layers.hpp"
#include "ditair/params.hpp"

namespace ditair {
namespace arch {

// =============================================================================
// Variants and configuration
// =============================================================================

enum class Variant {
    PixArt,               // image stream + per-layer cross-attention to text
    MMDiT,                // dual-stream, per-layer AdaLN
    MMDiTSharedAdaLN,     // dual-stream, one AdaLN set for all layers
    DiTAir,               // single joint stream, shared dual-stream AdaLN
    DiTAirLiteFull,       // DiT-Air with the whole block shared across layers
    DiTAirLiteAttention,  // DiT-Air with QKVO shared, per-layer MLPs
};

const char* variant_name(Variant v);
Variant parse_variant(const std::string& s);  // ConfigError on unknown name

// Joint variants concatenate text then image into one token sequence.
bool variant_is_joint(Variant v);
// Dual-stream variants give text tokens their own projection/MLP weights.
bool variant_is_dual_stream(Variant v);

struct ModelConfig {
    Variant variant = Variant::DiTAir;
    int64_t n_layers = 2;
    int64_t d = 128;
    int64_t heads = 2;
    int64_t patch = 2;
    int64_t latent_channels = 4;
    int64_t l_text = 8;
    int64_t d_enc = 16;
    int64_t time_dim = 256;
    bool use_pooled = true;  // ablation hook: drop the pooled-text AdaLN input
    uint64_t seed = 0;
};

// Size presets S/B/L/XL/XXL: layers {12,18,24,30,38}, d = 64 * layers,
// heads = layers.
ModelConfig preset_config(Variant v, const std::string& size);
ModelConfig preset_config(Variant v, char size);

void validate(const ModelConfig& cfg);  // ConfigError on a bad combination

// Flat `key = value` file with '#' comments. Accepted keys: variant, size,
// n_layers, d, heads, patch, latent_channels, text_len, d_enc, use_pooled,
// seed. Unknown keys are rejected.
ModelConfig read_model_config(const std::string& path);

// =============================================================================
// Parameter plan
// =============================================================================
//
// plan_parameters lists every unique tensor once, in canonical order, and
// wires layer slots back to plan indices. Sharing is expressed by several
// slots holding the same id, so audits can price a model without building
// it and optimizers see exactly one slot per unique tensor.

struct AttnSlots {
    ParamId wq = -1, bq = -1, wk = -1, bk = -1, wv = -1, bv = -1;
    ParamId wo = -1, bo = -1, qs = -1, ks = -1;
};

struct MlpSlots {
    ParamId up_w = -1, up_b = -1, down_w = -1, down_b = -1;
};

struct LayerSlots {
    ParamId ada_w[2] = {-1, -1};  // stream 0 = text (or the single stream)
    ParamId ada_b[2] = {-1, -1};  // stream 1 = image
    AttnSlots attn[2];            // set 0 = joint/image, set 1 = text (MMDiT)
    MlpSlots mlp[2];
    AttnSlots cross;              // PixArt only
    ParamId cross_gate = -1;      // PixArt only, zero-init, broadcast
};

struct ModelPlan {
    ModelConfig cfg;
    std::vector<ParamPlan> params;

    ParamId patch_w = -1, patch_b = -1;
    ParamId time_w1 = -1, time_b1 = -1, time_w2 = -1, time_b2 = -1;
    ParamId ctx_w = -1, ctx_b = -1, pool_w = -1, pool_b = -1;
    ParamId null_ctx = -1, null_pool = -1;
    std::vector<LayerSlots> layers;
    ParamId head_ada_w = -1, head_ada_b = -1, head_w = -1, head_b = -1;
};

ModelPlan plan_parameters(const ModelConfig& cfg);

// Installs the variant's aliasing into per-layer slots: which layers point
// at shared AdaLN / attention / MLP tensors. Exposed for the sharing tests;
// plan_parameters already calls it.
void apply_sharing(ModelPlan& plan);

// =============================================================================
// Model
// =============================================================================

template <typename T>
struct Model {
    ModelPlan plan;
    ParamStore<T> store;

    const ModelConfig& cfg() const { return plan.cfg; }
    const Tensor<T>& p(ParamId id) const { return store.value(id); }
    Tensor<T>& g(ParamId id) { return store.grad(id); }
};

template <typename T>
Model<T> build_model(const ModelConfig& cfg);

// =============================================================================
// Latent <-> token layout
// =============================================================================

// [B, c, H, W] -> [B * (H/p)(W/p), p*p*c]; feature order (channel, py, px),
// tokens row-major over the patch grid. unpatchify is the exact inverse.
template <typename T>
Tensor<T> patchify(const Tensor<T>& z, int64_t p);

template <typename T>
Tensor<T> unpatchify(const Tensor<T>& tok, int64_t batch, int64_t c, int64_t h,
                     int64_t w, int64_t p);

// =============================================================================
// Forward / backward
// =============================================================================

// One parameter-application span: tokens [lo, hi) of every sample, using
// attention/MLP set `set`, with rope table rows starting at rope_offset.
struct StreamSpec {
    int64_t lo = 0, hi = 0;
    int set = 0;
    int64_t rope_offset = 0;
};

template <typename T>
struct SublayerCache {
    layers::LnCache<T> pre;
    std::vector<layers::QkvCache<T>> qkv;    // attention: per projection stream
    layers::CoreCache<T> core;
    std::vector<layers::LinearCache<T>> out;
    std::vector<layers::MlpCache<T>> mlp;    // MLP sublayer: per projection stream
    layers::LnCache<T> post;
    Tensor<T> q, k, v;                       // joint attention inputs
};

template <typename T>
struct LayerCache {
    std::vector<Tensor<T>> mods;                 // per mod stream, [B, 6d]
    std::vector<layers::LinearCache<T>> ada;     // per mod stream
    SublayerCache<T> attn;
    SublayerCache<T> cross;                      // PixArt
    SublayerCache<T> mlp;
};

template <typename T>
struct ForwardCache {
    int64_t batch = 0, grid_h = 0, grid_w = 0, l_img = 0, seq = 0;
    int64_t height = 0, width = 0;
    std::vector<uint8_t> null_mask;
    bool used_pooled = false;

    layers::RopeTable<T> rope;
    layers::MlpCache<T> time_mlp;            // sinusoid -> GELU MLP -> d
    layers::LinearCache<T> pool_proj;
    layers::LinearCache<T> ctx_proj;
    Tensor<T> cond_vec;                      // [B, d]
    Tensor<T> ctx_d;                         // [B * l_text, d]
    layers::LinearCache<T> patch_proj;

    std::vector<LayerCache<T>> layers;

    layers::LnCache<T> head_ln;
    Tensor<T> head_mod;                      // [B, 2d]
    layers::LinearCache<T> head_ada;
    layers::LinearCache<T> head_out;
};

// f(z_t, c, t): prediction with the shape of z_t. Pass a cache to enable
// backward. Text positions of the internal sequence are discarded at the
// head. Throws DimensionError/ConfigError on shape or config mismatches.
template <typename T>
Tensor<T> forward(const Model<T>& m, const Tensor<T>& z_t,
                  const cond::CondBatch<T>& cb, const Tensor<T>& t,
                  ForwardCache<T>* cache);

// Accumulates parameter gradients into the store. Gradients reaching null
// samples' conditioning rows land in the learned null embeddings; data
// inputs receive no gradient.
template <typename T>
void backward(Model<T>& m, const Tensor<T>& dpred, const ForwardCache<T>& cache);

}  // namespace arch
}  // namespace ditair
