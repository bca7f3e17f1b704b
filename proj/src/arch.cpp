#include "ditair/arch.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

namespace ditair {
namespace arch {

using layers::AttnGrads;
using layers::AttnParams;
using layers::Mask;
using layers::RopeTable;

// =============================================================================
// Variants and configuration
// =============================================================================

const char* variant_name(Variant v) {
    switch (v) {
        case Variant::PixArt: return "pixart";
        case Variant::MMDiT: return "mmdit";
        case Variant::MMDiTSharedAdaLN: return "mmdit_shared_adaln";
        case Variant::DiTAir: return "dit_air";
        case Variant::DiTAirLiteFull: return "dit_air_lite_full";
        case Variant::DiTAirLiteAttention: return "dit_air_lite_attention";
    }
    return "?";
}

Variant parse_variant(const std::string& s) {
    for (Variant v : {Variant::PixArt, Variant::MMDiT, Variant::MMDiTSharedAdaLN,
                      Variant::DiTAir, Variant::DiTAirLiteFull,
                      Variant::DiTAirLiteAttention})
        if (s == variant_name(v)) return v;
    throw ConfigError("unknown variant: " + s);
}

bool variant_is_joint(Variant v) { return v != Variant::PixArt; }

bool variant_is_dual_stream(Variant v) {
    return v == Variant::MMDiT || v == Variant::MMDiTSharedAdaLN;
}

namespace {

// Which tensors are shared across layers, per variant.
bool shares_adaln(Variant v) { return v != Variant::MMDiT; }
int adaln_streams(Variant v) { return v == Variant::PixArt ? 1 : 2; }
bool shares_attn(Variant v) {
    return v == Variant::DiTAirLiteFull || v == Variant::DiTAirLiteAttention;
}
bool shares_mlp(Variant v) { return v == Variant::DiTAirLiteFull; }

int64_t preset_layers(const std::string& size) {
    if (size == "S") return 12;
    if (size == "B") return 18;
    if (size == "L") return 24;
    if (size == "XL") return 30;
    if (size == "XXL") return 38;
    throw ConfigError("unknown size preset: " + size);
}

}  // namespace

ModelConfig preset_config(Variant v, char size) {
    return preset_config(v, std::string(1, size));
}

ModelConfig preset_config(Variant v, const std::string& size) {
    ModelConfig cfg;
    cfg.variant = v;
    cfg.n_layers = preset_layers(size);
    cfg.d = 64 * cfg.n_layers;
    cfg.heads = cfg.n_layers;
    validate(cfg);
    return cfg;
}

void validate(const ModelConfig& cfg) {
    auto fail = [](const std::string& msg) { throw ConfigError(msg); };
    if (cfg.n_layers < 1) fail("n_layers must be >= 1");
    if (cfg.d < 1 || cfg.heads < 1) fail("d and heads must be >= 1");
    if (cfg.d % cfg.heads != 0) fail("d must be divisible by heads");
    if ((cfg.d / cfg.heads) % 4 != 0)
        fail("head width must be divisible by 4 for 2D rotary positions");
    if (cfg.patch < 1) fail("patch must be >= 1");
    if (cfg.latent_channels < 1) fail("latent_channels must be >= 1");
    if (cfg.l_text < 1) fail("text_len must be >= 1");
    if (cfg.d_enc < 1) fail("d_enc must be >= 1");
    if (cfg.time_dim < 2 || cfg.time_dim % 2 != 0) fail("time_dim must be even");
}

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

int64_t to_int(const std::string& key, const std::string& v) {
    try {
        size_t used = 0;
        int64_t r = std::stoll(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return r;
    } catch (const std::exception&) {
        throw ConfigError("bad integer for " + key + ": '" + v + "'");
    }
}

bool to_bool(const std::string& key, const std::string& v) {
    if (v == "1" || v == "true" || v == "yes") return true;
    if (v == "0" || v == "false" || v == "no") return false;
    throw ConfigError("bad boolean for " + key + ": '" + v + "'");
}

}  // namespace

ModelConfig read_model_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open model config: " + path);
    ModelConfig cfg;
    std::string size;
    bool saw_layers = false, saw_d = false, saw_heads = false;
    std::string line;
    int64_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("expected key = value on line " + std::to_string(lineno));
        const std::string key = trim(line.substr(0, eq));
        const std::string val = trim(line.substr(eq + 1));
        if (key == "variant") cfg.variant = parse_variant(val);
        else if (key == "size") size = val;
        else if (key == "n_layers") { cfg.n_layers = to_int(key, val); saw_layers = true; }
        else if (key == "d") { cfg.d = to_int(key, val); saw_d = true; }
        else if (key == "heads") { cfg.heads = to_int(key, val); saw_heads = true; }
        else if (key == "patch") cfg.patch = to_int(key, val);
        else if (key == "latent_channels") cfg.latent_channels = to_int(key, val);
        else if (key == "text_len") cfg.l_text = to_int(key, val);
        else if (key == "d_enc") cfg.d_enc = to_int(key, val);
        else if (key == "use_pooled") cfg.use_pooled = to_bool(key, val);
        else if (key == "seed") cfg.seed = uint64_t(to_int(key, val));
        else throw ConfigError("unknown model config key: " + key);
    }
    if (!size.empty()) {
        const int64_t n = preset_layers(size);
        if (!saw_layers) cfg.n_layers = n;
        if (!saw_d) cfg.d = 64 * (saw_layers ? cfg.n_layers : n);
        if (!saw_heads) cfg.heads = saw_layers ? cfg.n_layers : n;
    }
    validate(cfg);
    return cfg;
}

// =============================================================================
// Parameter plan
// =============================================================================

namespace {

struct PlanBuilder {
    std::vector<ParamPlan>& params;
    ParamId add(const std::string& name, Shape shape, Component comp, InitSpec init) {
        params.push_back({name, std::move(shape), comp, init});
        return ParamId(params.size() - 1);
    }
};

constexpr double kInitStd = 0.02;

AttnSlots plan_attn(PlanBuilder& b, const std::string& prefix, int64_t d,
                    Component weight_bucket) {
    AttnSlots s;
    s.wq = b.add(prefix + ".wq", {d, d}, weight_bucket, InitSpec::normal(kInitStd));
    s.bq = b.add(prefix + ".bq", {d}, Component::Overhead, InitSpec::zero());
    s.wk = b.add(prefix + ".wk", {d, d}, weight_bucket, InitSpec::normal(kInitStd));
    s.bk = b.add(prefix + ".bk", {d}, Component::Overhead, InitSpec::zero());
    s.wv = b.add(prefix + ".wv", {d, d}, weight_bucket, InitSpec::normal(kInitStd));
    s.bv = b.add(prefix + ".bv", {d}, Component::Overhead, InitSpec::zero());
    s.wo = b.add(prefix + ".wo", {d, d}, weight_bucket, InitSpec::normal(kInitStd));
    s.bo = b.add(prefix + ".bo", {d}, Component::Overhead, InitSpec::zero());
    s.qs = b.add(prefix + ".q_scale", {d}, Component::Overhead, InitSpec::constant(1.0));
    s.ks = b.add(prefix + ".k_scale", {d}, Component::Overhead, InitSpec::constant(1.0));
    return s;
}

MlpSlots plan_mlp(PlanBuilder& b, const std::string& prefix, int64_t d) {
    MlpSlots s;
    s.up_w = b.add(prefix + ".up.w", {d, 4 * d}, Component::Mlp, InitSpec::normal(kInitStd));
    s.up_b = b.add(prefix + ".up.b", {4 * d}, Component::Overhead, InitSpec::zero());
    s.down_w = b.add(prefix + ".down.w", {4 * d, d}, Component::Mlp, InitSpec::normal(kInitStd));
    s.down_b = b.add(prefix + ".down.b", {d}, Component::Overhead, InitSpec::zero());
    return s;
}

void plan_adaln(PlanBuilder& b, const std::string& prefix, int64_t d, ParamId& w,
                ParamId& bias) {
    // Fully zero-initialized: shift, scale and gate all start at zero so a
    // fresh block is the identity map.
    w = b.add(prefix + ".w", {d, 6 * d}, Component::AdaLN, InitSpec::zero());
    bias = b.add(prefix + ".b", {6 * d}, Component::Overhead, InitSpec::zero());
}

ParamId find_param(const std::vector<ParamPlan>& params, const std::string& name) {
    for (size_t i = 0; i < params.size(); ++i)
        if (params[i].name == name) return ParamId(i);
    return -1;
}

}  // namespace

void apply_sharing(ModelPlan& plan) {
    const Variant v = plan.cfg.variant;
    const auto& ps = plan.params;
    auto resolve_attn = [&](AttnSlots& s, const std::string& prefix) {
        if (s.wq >= 0) return;
        s.wq = find_param(ps, prefix + ".wq");
        s.bq = find_param(ps, prefix + ".bq");
        s.wk = find_param(ps, prefix + ".wk");
        s.bk = find_param(ps, prefix + ".bk");
        s.wv = find_param(ps, prefix + ".wv");
        s.bv = find_param(ps, prefix + ".bv");
        s.wo = find_param(ps, prefix + ".wo");
        s.bo = find_param(ps, prefix + ".bo");
        s.qs = find_param(ps, prefix + ".q_scale");
        s.ks = find_param(ps, prefix + ".k_scale");
    };
    for (auto& layer : plan.layers) {
        if (shares_adaln(v)) {
            for (int s = 0; s < adaln_streams(v); ++s) {
                if (layer.ada_w[s] < 0) {
                    layer.ada_w[s] =
                        find_param(ps, "shared.ada" + std::to_string(s) + ".w");
                    layer.ada_b[s] =
                        find_param(ps, "shared.ada" + std::to_string(s) + ".b");
                }
            }
        }
        if (shares_attn(v)) resolve_attn(layer.attn[0], "shared.attn");
        if (shares_mlp(v) && layer.mlp[0].up_w < 0) {
            layer.mlp[0].up_w = find_param(ps, "shared.mlp.up.w");
            layer.mlp[0].up_b = find_param(ps, "shared.mlp.up.b");
            layer.mlp[0].down_w = find_param(ps, "shared.mlp.down.w");
            layer.mlp[0].down_b = find_param(ps, "shared.mlp.down.b");
        }
    }
}

ModelPlan plan_parameters(const ModelConfig& cfg) {
    validate(cfg);
    ModelPlan plan;
    plan.cfg = cfg;
    PlanBuilder b{plan.params};
    const int64_t d = cfg.d;
    const int64_t pc = cfg.patch * cfg.patch * cfg.latent_channels;
    const Variant v = cfg.variant;

    plan.patch_w = b.add("patch.w", {pc, d}, Component::Overhead, InitSpec::normal(kInitStd));
    plan.patch_b = b.add("patch.b", {d}, Component::Overhead, InitSpec::zero());
    plan.time_w1 = b.add("time.w1", {cfg.time_dim, d}, Component::Overhead, InitSpec::normal(kInitStd));
    plan.time_b1 = b.add("time.b1", {d}, Component::Overhead, InitSpec::zero());
    plan.time_w2 = b.add("time.w2", {d, d}, Component::Overhead, InitSpec::normal(kInitStd));
    plan.time_b2 = b.add("time.b2", {d}, Component::Overhead, InitSpec::zero());
    plan.ctx_w = b.add("cond.ctx.w", {cfg.d_enc, d}, Component::Overhead, InitSpec::normal(kInitStd));
    plan.ctx_b = b.add("cond.ctx.b", {d}, Component::Overhead, InitSpec::zero());
    plan.pool_w = b.add("cond.pool.w", {cfg.d_enc, d}, Component::Overhead, InitSpec::normal(kInitStd));
    plan.pool_b = b.add("cond.pool.b", {d}, Component::Overhead, InitSpec::zero());
    plan.null_ctx = b.add("cond.null_ctx", {cfg.d_enc}, Component::Overhead, InitSpec::normal(kInitStd));
    plan.null_pool = b.add("cond.null_pool", {cfg.d_enc}, Component::Overhead, InitSpec::normal(kInitStd));

    if (shares_adaln(v)) {
        ParamId w = -1, bias = -1;
        for (int s = 0; s < adaln_streams(v); ++s) {
            plan_adaln(b, "shared.ada" + std::to_string(s), d, w, bias);
        }
    }
    if (shares_attn(v)) plan_attn(b, "shared.attn", d, Component::SelfAttn);
    if (shares_mlp(v)) plan_mlp(b, "shared.mlp", d);

    plan.layers.resize(size_t(cfg.n_layers));
    for (int64_t i = 0; i < cfg.n_layers; ++i) {
        LayerSlots& L = plan.layers[size_t(i)];
        const std::string lp = "layer" + std::to_string(i);
        if (!shares_adaln(v)) {
            for (int s = 0; s < adaln_streams(v); ++s)
                plan_adaln(b, lp + ".ada" + std::to_string(s), d, L.ada_w[s], L.ada_b[s]);
        }
        if (!shares_attn(v)) L.attn[0] = plan_attn(b, lp + ".attn", d, Component::SelfAttn);
        if (variant_is_dual_stream(v))
            L.attn[1] = plan_attn(b, lp + ".tattn", d, Component::SelfAttn);
        if (v == Variant::PixArt) {
            L.cross = plan_attn(b, lp + ".cross", d, Component::CrossAttn);
            L.cross_gate = b.add(lp + ".cross.gate", {d}, Component::Overhead, InitSpec::zero());
        }
        if (!shares_mlp(v)) L.mlp[0] = plan_mlp(b, lp + ".mlp", d);
        if (variant_is_dual_stream(v)) L.mlp[1] = plan_mlp(b, lp + ".tmlp", d);
    }

    plan.head_ada_w = b.add("head.ada.w", {d, 2 * d}, Component::Overhead, InitSpec::zero());
    plan.head_ada_b = b.add("head.ada.b", {2 * d}, Component::Overhead, InitSpec::zero());
    plan.head_w = b.add("head.w", {d, pc}, Component::Overhead, InitSpec::zero());
    plan.head_b = b.add("head.b", {pc}, Component::Overhead, InitSpec::zero());

    apply_sharing(plan);
    return plan;
}

template <typename T>
Model<T> build_model(const ModelConfig& cfg) {
    Model<T> m;
    m.plan = plan_parameters(cfg);
    Rng root(cfg.seed, 21);
    for (size_t i = 0; i < m.plan.params.size(); ++i)
        m.store.add(m.plan.params[i], root.split(uint64_t(i)));
    return m;
}

// =============================================================================
// Latent <-> token layout
// =============================================================================

template <typename T>
Tensor<T> patchify(const Tensor<T>& z, int64_t p) {
    check(z.rank() == 4, "latent must be [batch, channels, h, w]");
    const int64_t B = z.dim(0), c = z.dim(1), H = z.dim(2), W = z.dim(3);
    check(H % p == 0 && W % p == 0, "spatial dims not divisible by patch size");
    const int64_t gh = H / p, gw = W / p;
    Tensor<T> tok({B * gh * gw, p * p * c});
    for (int64_t b = 0; b < B; ++b)
        for (int64_t r = 0; r < gh; ++r)
            for (int64_t col = 0; col < gw; ++col) {
                T* out = tok.ptr() + (b * gh * gw + r * gw + col) * (p * p * c);
                for (int64_t ch = 0; ch < c; ++ch)
                    for (int64_t py = 0; py < p; ++py)
                        for (int64_t px = 0; px < p; ++px)
                            out[ch * p * p + py * p + px] =
                                z[((b * c + ch) * H + r * p + py) * W + col * p + px];
            }
    return tok;
}

template <typename T>
Tensor<T> unpatchify(const Tensor<T>& tok, int64_t batch, int64_t c, int64_t h,
                     int64_t w, int64_t p) {
    const int64_t gh = h / p, gw = w / p;
    check(tok.rank() == 2 && tok.dim(0) == batch * gh * gw && tok.dim(1) == p * p * c,
          "token tensor does not match the target latent shape");
    Tensor<T> z({batch, c, h, w});
    for (int64_t b = 0; b < batch; ++b)
        for (int64_t r = 0; r < gh; ++r)
            for (int64_t col = 0; col < gw; ++col) {
                const T* in = tok.ptr() + (b * gh * gw + r * gw + col) * (p * p * c);
                for (int64_t ch = 0; ch < c; ++ch)
                    for (int64_t py = 0; py < p; ++py)
                        for (int64_t px = 0; px < p; ++px)
                            z[((b * c + ch) * h + r * p + py) * w + col * p + px] =
                                in[ch * p * p + py * p + px];
            }
    return z;
}

// =============================================================================
// Stream plans
// =============================================================================

namespace {

std::vector<StreamSpec> proj_streams(const ModelConfig& cfg, int64_t l_img) {
    const int64_t lt = cfg.l_text;
    if (cfg.variant == Variant::PixArt) return {{0, l_img, 0, 0}};
    if (variant_is_dual_stream(cfg.variant))
        return {{0, lt, 1, 0}, {lt, lt + l_img, 0, lt}};
    return {{0, lt + l_img, 0, 0}};
}

std::vector<StreamSpec> mod_streams(const ModelConfig& cfg, int64_t l_img) {
    const int64_t lt = cfg.l_text;
    if (cfg.variant == Variant::PixArt) return {{0, l_img, 0, 0}};
    return {{0, lt, 0, 0}, {lt, lt + l_img, 1, 0}};
}

template <typename T>
Tensor<T> slice_span(const Tensor<T>& x, int64_t batch, int64_t seq, int64_t lo,
                     int64_t hi) {
    const int64_t d = x.dim(1), len = hi - lo;
    Tensor<T> s({batch * len, d});
    for (int64_t b = 0; b < batch; ++b)
        for (int64_t i = 0; i < len; ++i)
            for (int64_t c = 0; c < d; ++c)
                s.at(b * len + i, c) = x.at(b * seq + lo + i, c);
    return s;
}

template <typename T>
void scatter_span(const Tensor<T>& s, Tensor<T>& x, int64_t batch, int64_t seq,
                  int64_t lo, int64_t hi, bool add) {
    const int64_t d = x.dim(1), len = hi - lo;
    for (int64_t b = 0; b < batch; ++b)
        for (int64_t i = 0; i < len; ++i)
            for (int64_t c = 0; c < d; ++c) {
                T& dst = x.at(b * seq + lo + i, c);
                if (add) dst += s.at(b * len + i, c);
                else dst = s.at(b * len + i, c);
            }
}

template <typename T>
AttnParams<T> bind_attn(const Model<T>& m, const AttnSlots& s) {
    return {&m.p(s.wq), &m.p(s.bq), &m.p(s.wk), &m.p(s.bk), &m.p(s.wv), &m.p(s.bv),
            &m.p(s.wo), &m.p(s.bo), &m.p(s.qs), &m.p(s.ks), m.cfg().heads};
}

template <typename T>
AttnGrads<T> bind_attn_grads(Model<T>& m, const AttnSlots& s) {
    return {&m.g(s.wq), &m.g(s.bq), &m.g(s.wk), &m.g(s.bk), &m.g(s.wv), &m.g(s.bv),
            &m.g(s.wo), &m.g(s.bo), &m.g(s.qs), &m.g(s.ks)};
}

constexpr double kLnEps = 1e-6;

// -----------------------------------------------------------------------------
// Attention sublayer over the assembled sequence
// -----------------------------------------------------------------------------

template <typename T>
void attn_sub_forward(const Model<T>& m, const LayerSlots& sl, Tensor<T>& x,
                      SublayerCache<T>& sc, const std::vector<Tensor<T>>& mods,
                      const std::vector<StreamSpec>& ps,
                      const std::vector<StreamSpec>& ms, const RopeTable<T>& rope,
                      int64_t batch, int64_t seq) {
    const int64_t d = x.dim(1);
    Tensor<T> u = layers::layernorm(x, T(kLnEps), &sc.pre);
    Tensor<T> um({batch * seq, d});
    for (const auto& s : ms)
        layers::modulate_span(u, mods[size_t(s.set)].ptr() + 0 * d,
                              mods[size_t(s.set)].ptr() + 1 * d, 6 * d, batch, seq,
                              s.lo, s.hi, um);
    sc.q = Tensor<T>({batch * seq, d});
    sc.k = Tensor<T>({batch * seq, d});
    sc.v = Tensor<T>({batch * seq, d});
    sc.qkv.resize(ps.size());
    for (size_t si = 0; si < ps.size(); ++si) {
        const auto& s = ps[si];
        const int64_t len = s.hi - s.lo;
        Tensor<T> xs = slice_span(um, batch, seq, s.lo, s.hi);
        layers::qkv_project(xs, xs, bind_attn(m, sl.attn[s.set]), &rope, len, len,
                            s.rope_offset, s.rope_offset, sc.qkv[si]);
        scatter_span(sc.qkv[si].q, sc.q, batch, seq, s.lo, s.hi, false);
        scatter_span(sc.qkv[si].k, sc.k, batch, seq, s.lo, s.hi, false);
        scatter_span(sc.qkv[si].v, sc.v, batch, seq, s.lo, s.hi, false);
    }
    Tensor<T> ctx = layers::attn_core_forward(sc.q, sc.k, sc.v, batch, seq, seq,
                                              m.cfg().heads, Mask::None, &sc.core);
    Tensor<T> sub({batch * seq, d});
    sc.out.resize(ps.size());
    for (size_t si = 0; si < ps.size(); ++si) {
        const auto& s = ps[si];
        Tensor<T> cs = slice_span(ctx, batch, seq, s.lo, s.hi);
        Tensor<T> os = layers::linear(cs, m.p(sl.attn[s.set].wo),
                                      &m.p(sl.attn[s.set].bo), &sc.out[si]);
        scatter_span(os, sub, batch, seq, s.lo, s.hi, false);
    }
    Tensor<T> pn = layers::layernorm(sub, T(kLnEps), &sc.post);
    for (const auto& s : ms)
        layers::gate_span(x, pn, mods[size_t(s.set)].ptr() + 2 * d, 6 * d, batch, seq,
                          s.lo, s.hi);
}

template <typename T>
void attn_sub_backward(Model<T>& m, const LayerSlots& sl, Tensor<T>& dx,
                       const SublayerCache<T>& sc, const std::vector<Tensor<T>>& mods,
                       std::vector<Tensor<T>>& dmods, const std::vector<StreamSpec>& ps,
                       const std::vector<StreamSpec>& ms, const RopeTable<T>& rope,
                       int64_t batch, int64_t seq) {
    const int64_t d = dx.dim(1);
    Tensor<T> dpn({batch * seq, d});
    for (const auto& s : ms)
        layers::gate_span_backward(dx, sc.post.y, mods[size_t(s.set)].ptr() + 2 * d,
                                   6 * d, batch, seq, s.lo, s.hi, dpn,
                                   dmods[size_t(s.set)].ptr() + 2 * d, 6 * d);
    Tensor<T> dsub({batch * seq, d});
    layers::layernorm_backward_cached(dpn, sc.post, dsub);
    Tensor<T> dctx({batch * seq, d});
    for (size_t si = 0; si < ps.size(); ++si) {
        const auto& s = ps[si];
        Tensor<T> dos = slice_span(dsub, batch, seq, s.lo, s.hi);
        Tensor<T> dcs({(s.hi - s.lo) * batch, d});
        layers::linear_backward(dos, sc.out[si], m.p(sl.attn[s.set].wo),
                                m.g(sl.attn[s.set].wo), &m.g(sl.attn[s.set].bo), &dcs);
        scatter_span(dcs, dctx, batch, seq, s.lo, s.hi, false);
    }
    Tensor<T> dq({batch * seq, d}), dk({batch * seq, d}), dv({batch * seq, d});
    layers::attn_core_backward(dctx, sc.q, sc.k, sc.v, sc.core, batch, seq, seq,
                               m.cfg().heads, Mask::None, dq, dk, dv);
    Tensor<T> dum({batch * seq, d});
    for (size_t si = 0; si < ps.size(); ++si) {
        const auto& s = ps[si];
        const int64_t len = s.hi - s.lo;
        Tensor<T> dqs = slice_span(dq, batch, seq, s.lo, s.hi);
        Tensor<T> dks = slice_span(dk, batch, seq, s.lo, s.hi);
        Tensor<T> dvs = slice_span(dv, batch, seq, s.lo, s.hi);
        Tensor<T> dxs({batch * len, d});
        AttnGrads<T> g = bind_attn_grads(m, sl.attn[s.set]);
        layers::qkv_project_backward(dqs, dks, dvs, sc.qkv[si],
                                     bind_attn(m, sl.attn[s.set]), &rope, len, len,
                                     s.rope_offset, s.rope_offset, g, &dxs, &dxs);
        scatter_span(dxs, dum, batch, seq, s.lo, s.hi, false);
    }
    Tensor<T> du({batch * seq, d});
    for (const auto& s : ms)
        layers::modulate_span_backward(dum, sc.pre.y, mods[size_t(s.set)].ptr() + 1 * d,
                                       6 * d, batch, seq, s.lo, s.hi, du,
                                       dmods[size_t(s.set)].ptr() + 0 * d,
                                       dmods[size_t(s.set)].ptr() + 1 * d, 6 * d);
    layers::layernorm_backward_cached(du, sc.pre, dx);
}

// -----------------------------------------------------------------------------
// MLP sublayer
// -----------------------------------------------------------------------------

template <typename T>
void mlp_sub_forward(const Model<T>& m, const LayerSlots& sl, Tensor<T>& x,
                     SublayerCache<T>& sc, const std::vector<Tensor<T>>& mods,
                     const std::vector<StreamSpec>& ps,
                     const std::vector<StreamSpec>& ms, int64_t batch, int64_t seq) {
    const int64_t d = x.dim(1);
    Tensor<T> u = layers::layernorm(x, T(kLnEps), &sc.pre);
    Tensor<T> um({batch * seq, d});
    for (const auto& s : ms)
        layers::modulate_span(u, mods[size_t(s.set)].ptr() + 3 * d,
                              mods[size_t(s.set)].ptr() + 4 * d, 6 * d, batch, seq,
                              s.lo, s.hi, um);
    Tensor<T> sub({batch * seq, d});
    sc.mlp.resize(ps.size());
    for (size_t si = 0; si < ps.size(); ++si) {
        const auto& s = ps[si];
        Tensor<T> xs = slice_span(um, batch, seq, s.lo, s.hi);
        const MlpSlots& mp = sl.mlp[s.set];
        Tensor<T> ys = layers::mlp_forward(xs, m.p(mp.up_w), m.p(mp.up_b),
                                           m.p(mp.down_w), m.p(mp.down_b), &sc.mlp[si]);
        scatter_span(ys, sub, batch, seq, s.lo, s.hi, false);
    }
    Tensor<T> pn = layers::layernorm(sub, T(kLnEps), &sc.post);
    for (const auto& s : ms)
        layers::gate_span(x, pn, mods[size_t(s.set)].ptr() + 5 * d, 6 * d, batch, seq,
                          s.lo, s.hi);
}

template <typename T>
void mlp_sub_backward(Model<T>& m, const LayerSlots& sl, Tensor<T>& dx,
                      const SublayerCache<T>& sc, const std::vector<Tensor<T>>& mods,
                      std::vector<Tensor<T>>& dmods, const std::vector<StreamSpec>& ps,
                      const std::vector<StreamSpec>& ms, int64_t batch, int64_t seq) {
    const int64_t d = dx.dim(1);
    Tensor<T> dpn({batch * seq, d});
    for (const auto& s : ms)
        layers::gate_span_backward(dx, sc.post.y, mods[size_t(s.set)].ptr() + 5 * d,
                                   6 * d, batch, seq, s.lo, s.hi, dpn,
                                   dmods[size_t(s.set)].ptr() + 5 * d, 6 * d);
    Tensor<T> dsub({batch * seq, d});
    layers::layernorm_backward_cached(dpn, sc.post, dsub);
    Tensor<T> dum({batch * seq, d});
    for (size_t si = 0; si < ps.size(); ++si) {
        const auto& s = ps[si];
        const int64_t len = s.hi - s.lo;
        Tensor<T> dys = slice_span(dsub, batch, seq, s.lo, s.hi);
        Tensor<T> dxs({batch * len, d});
        const MlpSlots& mp = sl.mlp[s.set];
        layers::mlp_backward(dys, sc.mlp[si], m.p(mp.up_w), m.p(mp.down_w),
                             m.g(mp.up_w), m.g(mp.up_b), m.g(mp.down_w),
                             m.g(mp.down_b), &dxs);
        scatter_span(dxs, dum, batch, seq, s.lo, s.hi, false);
    }
    Tensor<T> du({batch * seq, d});
    for (const auto& s : ms)
        layers::modulate_span_backward(dum, sc.pre.y, mods[size_t(s.set)].ptr() + 4 * d,
                                       6 * d, batch, seq, s.lo, s.hi, du,
                                       dmods[size_t(s.set)].ptr() + 3 * d,
                                       dmods[size_t(s.set)].ptr() + 4 * d, 6 * d);
    layers::layernorm_backward_cached(du, sc.pre, dx);
}

// -----------------------------------------------------------------------------
// Cross-attention sublayer (PixArt): queries from tokens, keys/values from
// projected text, residual gated by a learned zero-init vector.
// -----------------------------------------------------------------------------

template <typename T>
void cross_sub_forward(const Model<T>& m, const LayerSlots& sl, Tensor<T>& x,
                       const Tensor<T>& ctx_d, SublayerCache<T>& sc, int64_t batch,
                       int64_t seq, int64_t l_text) {
    const int64_t d = x.dim(1);
    Tensor<T> u = layers::layernorm(x, T(kLnEps), &sc.pre);
    sc.qkv.resize(1);
    layers::qkv_project(u, ctx_d, bind_attn(m, sl.cross),
                        static_cast<const RopeTable<T>*>(nullptr), seq, l_text, 0, 0,
                        sc.qkv[0]);
    Tensor<T> ctx = layers::attn_core_forward(sc.qkv[0].q, sc.qkv[0].k, sc.qkv[0].v,
                                              batch, seq, l_text, m.cfg().heads,
                                              Mask::None, &sc.core);
    sc.out.resize(1);
    Tensor<T> sub = layers::linear(ctx, m.p(sl.cross.wo), &m.p(sl.cross.bo), &sc.out[0]);
    Tensor<T> pn = layers::layernorm(sub, T(kLnEps), &sc.post);
    layers::gate_span(x, pn, m.p(sl.cross_gate).ptr(), 0, batch, seq, 0, seq);
    (void)d;
}

template <typename T>
void cross_sub_backward(Model<T>& m, const LayerSlots& sl, Tensor<T>& dx,
                        const SublayerCache<T>& sc, Tensor<T>& dctx_d, int64_t batch,
                        int64_t seq, int64_t l_text) {
    const int64_t d = dx.dim(1);
    Tensor<T> dpn({batch * seq, d});
    layers::gate_span_backward(dx, sc.post.y, m.p(sl.cross_gate).ptr(), 0, batch, seq,
                               0, seq, dpn, m.g(sl.cross_gate).ptr(), 0);
    Tensor<T> dsub({batch * seq, d});
    layers::layernorm_backward_cached(dpn, sc.post, dsub);
    Tensor<T> dctx({batch * seq, d});
    layers::linear_backward(dsub, sc.out[0], m.p(sl.cross.wo), m.g(sl.cross.wo),
                            &m.g(sl.cross.bo), &dctx);
    Tensor<T> dq({batch * seq, d}), dk({batch * l_text, d}), dv({batch * l_text, d});
    layers::attn_core_backward(dctx, sc.qkv[0].q, sc.qkv[0].k, sc.qkv[0].v, sc.core,
                               batch, seq, l_text, m.cfg().heads, Mask::None, dq, dk,
                               dv);
    Tensor<T> du({batch * seq, d});
    AttnGrads<T> g = bind_attn_grads(m, sl.cross);
    layers::qkv_project_backward(dq, dk, dv, sc.qkv[0], bind_attn(m, sl.cross),
                                 static_cast<const RopeTable<T>*>(nullptr), seq,
                                 l_text, 0, 0, g, &du, &dctx_d);
    layers::layernorm_backward_cached(du, sc.pre, dx);
}

}  // namespace

// =============================================================================
// Forward
// =============================================================================

template <typename T>
Tensor<T> forward(const Model<T>& m, const Tensor<T>& z_t,
                  const cond::CondBatch<T>& cb, const Tensor<T>& t,
                  ForwardCache<T>* cache) {
    const ModelConfig& cfg = m.cfg();
    check(z_t.rank() == 4, "latent must be [batch, channels, h, w]");
    check(z_t.dim(1) == cfg.latent_channels, "latent channel count mismatch");
    const int64_t B = z_t.dim(0), H = z_t.dim(2), W = z_t.dim(3);
    check(H % cfg.patch == 0 && W % cfg.patch == 0,
          "spatial dims not divisible by patch size");
    check(cb.batch == B, "conditioning batch mismatch");
    check(cb.l_text == cfg.l_text, "conditioning text length mismatch");
    check(cb.ctx.dim(1) == cfg.d_enc, "conditioning width mismatch");
    check(t.size() == B, "timestep batch mismatch");

    ForwardCache<T> local;
    ForwardCache<T>& c = cache ? *cache : local;
    const int64_t d = cfg.d;
    const int64_t gh = H / cfg.patch, gw = W / cfg.patch, l_img = gh * gw;
    const bool joint = variant_is_joint(cfg.variant);
    const int64_t seq = joint ? cfg.l_text + l_img : l_img;
    c.batch = B;
    c.grid_h = gh;
    c.grid_w = gw;
    c.l_img = l_img;
    c.seq = seq;
    c.height = H;
    c.width = W;
    c.null_mask = cb.null_mask;
    c.used_pooled = cfg.use_pooled;
    c.rope = layers::build_rope_table<T>(joint ? cfg.l_text : 0, gh, gw,
                                         d / cfg.heads);

    // Conditioning features, null samples substituted with the learned nulls.
    Tensor<T> ctx_sub = cb.ctx;
    Tensor<T> pooled_sub = cb.pooled;
    for (int64_t s = 0; s < B; ++s) {
        if (!cb.null_mask.empty() && cb.null_mask[size_t(s)]) {
            for (int64_t i = 0; i < cfg.l_text; ++i)
                for (int64_t e = 0; e < cfg.d_enc; ++e)
                    ctx_sub.at(s * cfg.l_text + i, e) = m.p(m.plan.null_ctx)[e];
            for (int64_t e = 0; e < cfg.d_enc; ++e)
                pooled_sub.at(s, e) = m.p(m.plan.null_pool)[e];
        }
    }

    // Conditioning vector: time features through a GELU MLP, plus the pooled
    // text path unless ablated.
    Tensor<T> temb = layers::timestep_embedding(t, cfg.time_dim);
    c.cond_vec = layers::mlp_forward(temb, m.p(m.plan.time_w1), m.p(m.plan.time_b1),
                                     m.p(m.plan.time_w2), m.p(m.plan.time_b2),
                                     &c.time_mlp);
    if (cfg.use_pooled) {
        Tensor<T> pc = layers::linear(pooled_sub, m.p(m.plan.pool_w),
                                      &m.p(m.plan.pool_b), &c.pool_proj);
        for (int64_t i = 0; i < c.cond_vec.size(); ++i) c.cond_vec[i] += pc[i];
    }

    c.ctx_d = layers::linear(ctx_sub, m.p(m.plan.ctx_w), &m.p(m.plan.ctx_b),
                             &c.ctx_proj);

    Tensor<T> ptok = patchify(z_t, cfg.patch);
    Tensor<T> img = layers::linear(ptok, m.p(m.plan.patch_w), &m.p(m.plan.patch_b),
                                   &c.patch_proj);

    Tensor<T> x({B * seq, d});
    if (joint) {
        scatter_span(c.ctx_d, x, B, seq, 0, cfg.l_text, false);
        scatter_span(img, x, B, seq, cfg.l_text, seq, false);
    } else {
        x = img;
    }

    const auto ps = proj_streams(cfg, l_img);
    const auto ms = mod_streams(cfg, l_img);
    c.layers.clear();
    c.layers.resize(size_t(cfg.n_layers));
    for (int64_t i = 0; i < cfg.n_layers; ++i) {
        const LayerSlots& sl = m.plan.layers[size_t(i)];
        LayerCache<T>& lc = c.layers[size_t(i)];
        lc.mods.resize(ms.size());
        lc.ada.resize(ms.size());
        for (size_t s = 0; s < ms.size(); ++s) {
            const int st = ms[s].set;
            lc.mods[size_t(st)] =
                layers::linear(c.cond_vec, m.p(sl.ada_w[st]), &m.p(sl.ada_b[st]),
                               &lc.ada[size_t(st)]);
        }
        attn_sub_forward(m, sl, x, lc.attn, lc.mods, ps, ms, c.rope, B, seq);
        if (cfg.variant == Variant::PixArt)
            cross_sub_forward(m, sl, x, c.ctx_d, lc.cross, B, seq, cfg.l_text);
        mlp_sub_forward(m, sl, x, lc.mlp, lc.mods, ps, ms, B, seq);
    }

    // Final head over image tokens only.
    Tensor<T> ximg = joint ? slice_span(x, B, seq, cfg.l_text, seq) : x;
    Tensor<T> hln = layers::layernorm(ximg, T(kLnEps), &c.head_ln);
    c.head_mod = layers::linear(c.cond_vec, m.p(m.plan.head_ada_w),
                                &m.p(m.plan.head_ada_b), &c.head_ada);
    Tensor<T> hm({B * l_img, d});
    layers::modulate_span(hln, c.head_mod.ptr() + 0 * d, c.head_mod.ptr() + 1 * d,
                          2 * d, B, l_img, 0, l_img, hm);
    Tensor<T> tok_out = layers::linear(hm, m.p(m.plan.head_w), &m.p(m.plan.head_b),
                                       &c.head_out);
    return unpatchify(tok_out, B, cfg.latent_channels, H, W, cfg.patch);
}

// =============================================================================
// Backward
// =============================================================================

template <typename T>
void backward(Model<T>& m, const Tensor<T>& dpred, const ForwardCache<T>& c) {
    const ModelConfig& cfg = m.cfg();
    const int64_t B = c.batch, l_img = c.l_img, seq = c.seq, d = cfg.d;
    const bool joint = variant_is_joint(cfg.variant);
    check(dpred.rank() == 4 && dpred.dim(0) == B, "prediction gradient shape mismatch");

    // Head.
    Tensor<T> dtok = patchify(dpred, cfg.patch);
    Tensor<T> dhm({B * l_img, d});
    layers::linear_backward(dtok, c.head_out, m.p(m.plan.head_w), m.g(m.plan.head_w),
                            &m.g(m.plan.head_b), &dhm);
    Tensor<T> dhln({B * l_img, d});
    Tensor<T> dhead_mod({B, 2 * d});
    layers::modulate_span_backward(dhm, c.head_ln.y, c.head_mod.ptr() + 1 * d, 2 * d,
                                   B, l_img, 0, l_img, dhln, dhead_mod.ptr() + 0 * d,
                                   dhead_mod.ptr() + 1 * d, 2 * d);
    Tensor<T> dcond({B, d});
    layers::linear_backward(dhead_mod, c.head_ada, m.p(m.plan.head_ada_w),
                            m.g(m.plan.head_ada_w), &m.g(m.plan.head_ada_b), &dcond);

    Tensor<T> dx({B * seq, d});
    if (joint) {
        Tensor<T> dximg({B * l_img, d});
        layers::layernorm_backward_cached(dhln, c.head_ln, dximg);
        scatter_span(dximg, dx, B, seq, cfg.l_text, seq, false);
    } else {
        layers::layernorm_backward_cached(dhln, c.head_ln, dx);
    }

    const auto ps = proj_streams(cfg, l_img);
    const auto ms = mod_streams(cfg, l_img);
    Tensor<T> dctx_d({B * cfg.l_text, d});
    for (int64_t i = cfg.n_layers - 1; i >= 0; --i) {
        const LayerSlots& sl = m.plan.layers[size_t(i)];
        const LayerCache<T>& lc = c.layers[size_t(i)];
        std::vector<Tensor<T>> dmods(ms.size());
        for (size_t s = 0; s < ms.size(); ++s) dmods[s] = Tensor<T>({B, 6 * d});
        mlp_sub_backward(m, sl, dx, lc.mlp, lc.mods, dmods, ps, ms, B, seq);
        if (cfg.variant == Variant::PixArt)
            cross_sub_backward(m, sl, dx, lc.cross, dctx_d, B, seq, cfg.l_text);
        attn_sub_backward(m, sl, dx, lc.attn, lc.mods, dmods, ps, ms, c.rope, B, seq);
        for (size_t s = 0; s < ms.size(); ++s) {
            const int st = ms[s].set;
            layers::linear_backward(dmods[size_t(st)], lc.ada[size_t(st)],
                                    m.p(sl.ada_w[st]), m.g(sl.ada_w[st]),
                                    &m.g(sl.ada_b[st]), &dcond);
        }
    }

    // Token initialization.
    Tensor<T> dimg_tok({B * l_img, d});
    if (joint) {
        Tensor<T> dtext = slice_span(dx, B, seq, 0, cfg.l_text);
        for (int64_t i = 0; i < dctx_d.size(); ++i) dctx_d[i] += dtext[i];
        dimg_tok = slice_span(dx, B, seq, cfg.l_text, seq);
    } else {
        dimg_tok = dx;
    }
    layers::linear_backward(dimg_tok, c.patch_proj, m.p(m.plan.patch_w),
                            m.g(m.plan.patch_w), &m.g(m.plan.patch_b),
                            static_cast<Tensor<T>*>(nullptr));

    // Conditioning paths. Gradients for null samples flow into the learned
    // null embeddings; data features receive none.
    Tensor<T> dctx_sub({B * cfg.l_text, cfg.d_enc});
    layers::linear_backward(dctx_d, c.ctx_proj, m.p(m.plan.ctx_w), m.g(m.plan.ctx_w),
                            &m.g(m.plan.ctx_b), &dctx_sub);
    for (int64_t s = 0; s < B; ++s) {
        if (!c.null_mask.empty() && c.null_mask[size_t(s)]) {
            for (int64_t i = 0; i < cfg.l_text; ++i)
                for (int64_t e = 0; e < cfg.d_enc; ++e)
                    m.g(m.plan.null_ctx)[e] += dctx_sub.at(s * cfg.l_text + i, e);
        }
    }
    if (c.used_pooled) {
        Tensor<T> dpooled({B, cfg.d_enc});
        layers::linear_backward(dcond, c.pool_proj, m.p(m.plan.pool_w),
                                m.g(m.plan.pool_w), &m.g(m.plan.pool_b), &dpooled);
        for (int64_t s = 0; s < B; ++s)
            if (!c.null_mask.empty() && c.null_mask[size_t(s)])
                for (int64_t e = 0; e < cfg.d_enc; ++e)
                    m.g(m.plan.null_pool)[e] += dpooled.at(s, e);
    }
    layers::mlp_backward(dcond, c.time_mlp, m.p(m.plan.time_w1), m.p(m.plan.time_w2),
                         m.g(m.plan.time_w1), m.g(m.plan.time_b1),
                         m.g(m.plan.time_w2), m.g(m.plan.time_b2),
                         static_cast<Tensor<T>*>(nullptr));
}

// =============================================================================
// Explicit instantiations
// =============================================================================

#define DITAIR_ARCH_INSTANTIATE(T)                                                   \
    template Model<T> build_model<T>(const ModelConfig&);                             \
    template Tensor<T> patchify<T>(const Tensor<T>&, int64_t);                        \
    template Tensor<T> unpatchify<T>(const Tensor<T>&, int64_t, int64_t, int64_t,     \
                                     int64_t, int64_t);                               \
    template Tensor<T> forward<T>(const Model<T>&, const Tensor<T>&,                  \
                                  const cond::CondBatch<T>&, const Tensor<T>&,        \
                                  ForwardCache<T>*);                                  \
    template void backward<T>(Model<T>&, const Tensor<T>&, const ForwardCache<T>&);

DITAIR_ARCH_INSTANTIATE(float)
DITAIR_ARCH_INSTANTIATE(double)
#undef DITAIR_ARCH_INSTANTIATE

}  // namespace arch
}  // namespace ditair
