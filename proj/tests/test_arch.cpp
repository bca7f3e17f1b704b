#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "doctest.h"

#include "ditair/arch.hpp"
#include "ditair/checkpoint.hpp"
#include "ditair/gradcheck.hpp"
#include "ditair/rng.hpp"

using namespace ditair;
using namespace ditair::arch;

namespace {

Tensor<double> randn(const Shape& s, uint64_t seed, double scale = 1.0) {
    Tensor<double> t(s);
    Rng r(seed, 9);
    r.fill_normal(t.ptr(), t.size(), scale);
    return t;
}

// Small config that exercises every code path cheaply: 2 layers, 2 heads,
// head width 8, a 2x2 patch grid and a 4-token text span.
ModelConfig tiny_config(Variant v) {
    ModelConfig cfg;
    cfg.variant = v;
    cfg.n_layers = 2;
    cfg.d = 16;
    cfg.heads = 2;
    cfg.patch = 2;
    cfg.latent_channels = 2;
    cfg.l_text = 4;
    cfg.d_enc = 8;
    cfg.time_dim = 16;
    cfg.seed = 7;
    return cfg;
}

cond::CondBatch<double> random_cond(const ModelConfig& cfg, int64_t batch,
                                    uint64_t seed) {
    cond::CondBatch<double> cb;
    cb.batch = batch;
    cb.l_text = cfg.l_text;
    cb.ctx = randn({batch * cfg.l_text, cfg.d_enc}, seed, 0.5);
    cb.pooled = randn({batch, cfg.d_enc}, seed + 1, 0.5);
    cb.null_mask.assign(size_t(batch), 0);
    return cb;
}

void randomize_params(Model<double>& m, uint64_t seed, double scale = 0.05) {
    auto& es = m.store.entries();
    for (size_t i = 0; i < es.size(); ++i) {
        Rng r(seed, 1000 + i);
        r.fill_normal(es[i].value.ptr(), es[i].value.size(), scale);
    }
}

int64_t bucket_count(const ModelPlan& plan, Component c) {
    int64_t n = 0;
    for (const auto& p : plan.params)
        if (p.component == c) n += p.count();
    return n;
}

ParamId find_id(const ModelPlan& plan, const std::string& name) {
    for (size_t i = 0; i < plan.params.size(); ++i)
        if (plan.params[i].name == name) return ParamId(i);
    return -1;
}

bool same_values(const Tensor<double>& a, const Tensor<double>& b) {
    if (a.size() != b.size()) return false;
    for (int64_t i = 0; i < a.size(); ++i)
        if (a[i] != b[i]) return false;
    return true;
}

const Variant kAllVariants[] = {
    Variant::PixArt,          Variant::MMDiT,
    Variant::MMDiTSharedAdaLN, Variant::DiTAir,
    Variant::DiTAirLiteFull,  Variant::DiTAirLiteAttention,
};

}  // namespace

// =============================================================================
// Configuration
// =============================================================================

TEST_CASE("variant names round-trip") {
    for (Variant v : kAllVariants) CHECK(parse_variant(variant_name(v)) == v);
    CHECK_THROWS_AS(parse_variant("dit_air_typo"), ConfigError);
}

TEST_CASE("size presets set layers, width and heads together") {
    ModelConfig b = preset_config(Variant::DiTAir, "B");
    CHECK(b.n_layers == 18);
    CHECK(b.d == 1152);
    CHECK(b.heads == 18);
    CHECK(preset_config(Variant::MMDiT, "S").d == 768);
    CHECK(preset_config(Variant::PixArt, "L").n_layers == 24);
    CHECK(preset_config(Variant::DiTAir, "XL").d == 1920);
    CHECK(preset_config(Variant::DiTAir, "XXL").n_layers == 38);
    CHECK_THROWS_AS(preset_config(Variant::DiTAir, "M"), ConfigError);
}

TEST_CASE("config validation rejects bad shapes") {
    ModelConfig cfg = tiny_config(Variant::DiTAir);
    cfg.heads = 3;  // 16 % 3 != 0
    CHECK_THROWS_AS(validate(cfg), ConfigError);
    cfg = tiny_config(Variant::DiTAir);
    cfg.d = 12;  // head width 6, not divisible by 4
    CHECK_THROWS_AS(validate(cfg), ConfigError);
    cfg = tiny_config(Variant::DiTAir);
    cfg.time_dim = 15;
    CHECK_THROWS_AS(validate(cfg), ConfigError);
}

TEST_CASE("model config file: parsing, presets and overrides") {
    const std::string path = "arch_cfg_test.txt";
    {
        std::ofstream out(path);
        out << "# comment line\n";
        out << "variant = mmdit_shared_adaln\n";
        out << "size = B  # preset fills layers/d/heads\n";
        out << "patch = 4\n";
        out << "text_len = 12\n";
    }
    ModelConfig cfg = read_model_config(path);
    CHECK(cfg.variant == Variant::MMDiTSharedAdaLN);
    CHECK(cfg.n_layers == 18);
    CHECK(cfg.d == 1152);
    CHECK(cfg.heads == 18);
    CHECK(cfg.patch == 4);
    CHECK(cfg.l_text == 12);

    {
        std::ofstream out(path);
        out << "size = S\n";
        out << "d = 384\n";  // explicit value wins over the preset
    }
    cfg = read_model_config(path);
    CHECK(cfg.n_layers == 12);
    CHECK(cfg.d == 384);
    CHECK(cfg.heads == 12);

    {
        std::ofstream out(path);
        out << "learning_rate = 0.1\n";
    }
    CHECK_THROWS_AS(read_model_config(path), ConfigError);
    {
        std::ofstream out(path);
        out << "use_pooled = maybe\n";
    }
    CHECK_THROWS_AS(read_model_config(path), ConfigError);
    CHECK_THROWS_AS(read_model_config("no_such_file.txt"), ConfigError);
    std::remove(path.c_str());
}

// =============================================================================
// Token layout
// =============================================================================

TEST_CASE("patchify places (channel, py, px) features in row-major patch order") {
    const int64_t B = 1, c = 2, H = 4, W = 4, p = 2;
    Tensor<double> z({B, c, H, W});
    for (int64_t i = 0; i < z.size(); ++i) z[i] = double(i);
    Tensor<double> tok = patchify(z, p);
    CHECK(tok.dim(0) == 4);
    CHECK(tok.dim(1) == 8);
    for (int64_t r = 0; r < 2; ++r)
        for (int64_t col = 0; col < 2; ++col)
            for (int64_t ch = 0; ch < c; ++ch)
                for (int64_t py = 0; py < p; ++py)
                    for (int64_t px = 0; px < p; ++px) {
                        const double want =
                            z[(ch * H + r * p + py) * W + col * p + px];
                        CHECK(tok.at(r * 2 + col, ch * 4 + py * 2 + px) == want);
                    }
}

TEST_CASE("unpatchify inverts patchify bitwise") {
    Tensor<double> z = randn({2, 3, 6, 8}, 31);
    Tensor<double> tok = patchify(z, 2);
    Tensor<double> back = unpatchify(tok, 2, 3, 6, 8, 2);
    CHECK(same_values(z, back));
    CHECK_THROWS_AS(patchify(randn({2, 3, 5, 8}, 32), 2), DimensionError);
}

// =============================================================================
// Parameter plan: per-bucket weight counts and sharing
// =============================================================================

TEST_CASE("weight buckets follow the per-variant parameter laws") {
    // Weight-bucket totals as functions of depth N and width d. Biases,
    // norm scales, embedders and the head are tracked separately.
    for (const std::string size : {"S", "B"}) {
        const int64_t N = preset_config(Variant::DiTAir, size).n_layers;
        const int64_t d = 64 * N, d2 = d * d;
        auto buckets = [&](Variant v) {
            ModelPlan plan = plan_parameters(preset_config(v, size));
            return std::array<int64_t, 4>{
                bucket_count(plan, Component::AdaLN),
                bucket_count(plan, Component::SelfAttn),
                bucket_count(plan, Component::CrossAttn),
                bucket_count(plan, Component::Mlp)};
        };
        auto px = buckets(Variant::PixArt);
        CHECK(px[0] == 6 * d2);
        CHECK(px[1] == 4 * N * d2);
        CHECK(px[2] == 4 * N * d2);
        CHECK(px[3] == 8 * N * d2);
        CHECK(px[0] + px[1] + px[2] + px[3] == (6 + 16 * N) * d2);

        auto mm = buckets(Variant::MMDiT);
        CHECK(mm[0] == 12 * N * d2);
        CHECK(mm[1] == 8 * N * d2);
        CHECK(mm[2] == 0);
        CHECK(mm[3] == 16 * N * d2);
        CHECK(mm[0] + mm[1] + mm[3] == 36 * N * d2);

        auto ms = buckets(Variant::MMDiTSharedAdaLN);
        CHECK(ms[0] == 12 * d2);
        CHECK(ms[0] + ms[1] + ms[3] == (12 + 24 * N) * d2);

        auto da = buckets(Variant::DiTAir);
        CHECK(da[0] == 12 * d2);
        CHECK(da[1] == 4 * N * d2);
        CHECK(da[3] == 8 * N * d2);
        CHECK(da[0] + da[1] + da[3] == (12 + 12 * N) * d2);

        auto lf = buckets(Variant::DiTAirLiteFull);
        CHECK(lf[0] + lf[1] + lf[3] == 24 * d2);

        auto la = buckets(Variant::DiTAirLiteAttention);
        CHECK(la[0] + la[1] + la[3] == (16 + 8 * N) * d2);
    }
}

TEST_CASE("per-layer vs shared modulation at size B differs by 270,729,216 weights") {
    ModelPlan per_layer = plan_parameters(preset_config(Variant::MMDiT, "B"));
    ModelPlan shared = plan_parameters(preset_config(Variant::MMDiTSharedAdaLN, "B"));
    const int64_t delta = bucket_count(per_layer, Component::AdaLN) -
                          bucket_count(shared, Component::AdaLN);
    CHECK(delta == 270729216);
}

TEST_CASE("sharing wires layer slots to one tensor") {
    ModelPlan lf = plan_parameters(tiny_config(Variant::DiTAirLiteFull));
    CHECK(lf.layers[0].attn[0].wq == lf.layers[1].attn[0].wq);
    CHECK(lf.layers[0].mlp[0].up_w == lf.layers[1].mlp[0].up_w);
    CHECK(lf.layers[0].ada_w[0] == lf.layers[1].ada_w[0]);
    CHECK(lf.layers[0].attn[0].wq == find_id(lf, "shared.attn.wq"));

    ModelPlan la = plan_parameters(tiny_config(Variant::DiTAirLiteAttention));
    CHECK(la.layers[0].attn[0].wq == la.layers[1].attn[0].wq);
    CHECK(la.layers[0].mlp[0].up_w != la.layers[1].mlp[0].up_w);

    ModelPlan da = plan_parameters(tiny_config(Variant::DiTAir));
    CHECK(da.layers[0].attn[0].wq != da.layers[1].attn[0].wq);
    CHECK(da.layers[0].ada_w[0] == da.layers[1].ada_w[0]);
    CHECK(da.layers[0].ada_w[1] == da.layers[1].ada_w[1]);

    ModelPlan mm = plan_parameters(tiny_config(Variant::MMDiT));
    CHECK(mm.layers[0].ada_w[0] != mm.layers[1].ada_w[0]);
    CHECK(mm.layers[0].attn[1].wq != -1);  // text stream has its own weights
    CHECK(mm.layers[0].attn[1].wq != mm.layers[0].attn[0].wq);
}

TEST_CASE("every layer slot resolves to a live parameter") {
    for (Variant v : kAllVariants) {
        ModelPlan plan = plan_parameters(tiny_config(v));
        const int streams = variant_is_dual_stream(v) ? 2 : 1;
        const int mod_streams = (v == Variant::PixArt) ? 1 : 2;
        for (const auto& L : plan.layers) {
            for (int s = 0; s < mod_streams; ++s) {
                CHECK(L.ada_w[s] >= 0);
                CHECK(L.ada_b[s] >= 0);
            }
            for (int s = 0; s < streams; ++s) {
                CHECK(L.attn[s].wq >= 0);
                CHECK(L.mlp[s].up_w >= 0);
            }
            if (v == Variant::PixArt) {
                CHECK(L.cross.wq >= 0);
                CHECK(L.cross_gate >= 0);
            }
        }
    }
}

// =============================================================================
// Forward
// =============================================================================

TEST_CASE("freshly built model predicts exactly zero") {
    for (Variant v : kAllVariants) {
        Model<double> m = build_model<double>(tiny_config(v));
        Tensor<double> z = randn({2, 2, 4, 4}, 41);
        auto cb = random_cond(m.cfg(), 2, 42);
        Tensor<double> t({2});
        t[0] = 0.25;
        t[1] = 0.75;
        Tensor<double> pred = forward<double>(m, z, cb, t, nullptr);
        CHECK(pred.rank() == 4);
        CHECK(pred.dim(2) == 4);
        for (int64_t i = 0; i < pred.size(); ++i) CHECK(pred[i] == 0.0);
    }
}

TEST_CASE("forward is deterministic and shape-checked") {
    Model<double> m = build_model<double>(tiny_config(Variant::DiTAir));
    randomize_params(m, 5);
    Tensor<double> z = randn({2, 2, 4, 8}, 51);
    auto cb = random_cond(m.cfg(), 2, 52);
    Tensor<double> t({2});
    t[0] = 0.3;
    t[1] = 0.6;
    Tensor<double> a = forward<double>(m, z, cb, t, nullptr);
    Tensor<double> b = forward<double>(m, z, cb, t, nullptr);
    CHECK(a.dim(0) == 2);
    CHECK(a.dim(1) == 2);
    CHECK(a.dim(2) == 4);
    CHECK(a.dim(3) == 8);
    CHECK(same_values(a, b));

    Tensor<double> bad = randn({2, 2, 5, 8}, 53);
    CHECK_THROWS_AS(forward<double>(m, bad, cb, t, nullptr), DimensionError);
    auto short_cb = random_cond(m.cfg(), 1, 54);
    CHECK_THROWS_AS(forward<double>(m, z, short_cb, t, nullptr), DimensionError);
}

TEST_CASE("prediction responds to text for every variant") {
    for (Variant v : kAllVariants) {
        Model<double> m = build_model<double>(tiny_config(v));
        randomize_params(m, 17);
        Tensor<double> z = randn({1, 2, 4, 4}, 61);
        Tensor<double> t({1});
        t[0] = 0.5;
        auto cb1 = random_cond(m.cfg(), 1, 62);
        auto cb2 = cb1;
        cb2.ctx.at(2, 3) += 1.0;
        Tensor<double> p1 = forward<double>(m, z, cb1, t, nullptr);
        Tensor<double> p2 = forward<double>(m, z, cb2, t, nullptr);
        double diff = 0.0;
        for (int64_t i = 0; i < p1.size(); ++i)
            diff = std::max(diff, std::abs(p1[i] - p2[i]));
        CHECK(diff > 0.0);

        auto cb3 = cb1;
        Tensor<double> p3 = forward<double>(m, z, cb3, t, nullptr);
        CHECK(same_values(p1, p3));
    }
}

TEST_CASE("null flag swaps in the learned null condition") {
    Model<double> m = build_model<double>(tiny_config(Variant::DiTAir));
    randomize_params(m, 23);
    Tensor<double> z = randn({1, 2, 4, 4}, 71);
    Tensor<double> t({1});
    t[0] = 0.4;
    auto cb = random_cond(m.cfg(), 1, 72);
    Tensor<double> with_text = forward<double>(m, z, cb, t, nullptr);
    auto cbn = cb;
    cbn.null_mask[0] = 1;
    Tensor<double> without = forward<double>(m, z, cbn, t, nullptr);
    double diff = 0.0;
    for (int64_t i = 0; i < with_text.size(); ++i)
        diff = std::max(diff, std::abs(with_text[i] - without[i]));
    CHECK(diff > 0.0);

    // With the flag set the data features are ignored entirely.
    auto cbn2 = random_cond(m.cfg(), 1, 99);
    cbn2.null_mask[0] = 1;
    Tensor<double> without2 = forward<double>(m, z, cbn2, t, nullptr);
    CHECK(same_values(without, without2));
}

TEST_CASE("pooled-path ablation ignores the pooled features") {
    ModelConfig cfg = tiny_config(Variant::DiTAir);
    cfg.use_pooled = false;
    Model<double> m = build_model<double>(cfg);
    randomize_params(m, 29);
    Tensor<double> z = randn({1, 2, 4, 4}, 81);
    Tensor<double> t({1});
    t[0] = 0.5;
    auto cb1 = random_cond(cfg, 1, 82);
    auto cb2 = cb1;
    for (int64_t i = 0; i < cb2.pooled.size(); ++i) cb2.pooled[i] += 3.0;
    Tensor<double> p1 = forward<double>(m, z, cb1, t, nullptr);
    Tensor<double> p2 = forward<double>(m, z, cb2, t, nullptr);
    CHECK(same_values(p1, p2));

    // The plan itself is unchanged, so checkpoints stay compatible.
    ModelConfig on = tiny_config(Variant::DiTAir);
    CHECK(plan_parameters(on).params.size() == plan_parameters(cfg).params.size());
}

// =============================================================================
// Sharing semantics at the value level
// =============================================================================

TEST_CASE("mutating a shared tensor moves every layer") {
    Model<double> lf = build_model<double>(tiny_config(Variant::DiTAirLiteFull));
    randomize_params(lf, 37);
    Tensor<double> z = randn({1, 2, 4, 4}, 91);
    auto cb = random_cond(lf.cfg(), 1, 92);
    Tensor<double> t({1});
    t[0] = 0.5;
    Tensor<double> base = forward<double>(lf, z, cb, t, nullptr);
    lf.store.value(lf.plan.layers[1].attn[0].wq).at(0, 0) += 0.5;
    Tensor<double> moved = forward<double>(lf, z, cb, t, nullptr);
    double diff = 0.0;
    for (int64_t i = 0; i < base.size(); ++i)
        diff = std::max(diff, std::abs(base[i] - moved[i]));
    CHECK(diff > 0.0);

    // Attention-only sharing keeps per-layer MLPs independent.
    Model<double> la = build_model<double>(tiny_config(Variant::DiTAirLiteAttention));
    CHECK(la.store.value(la.plan.layers[0].mlp[0].up_w).ptr() !=
          la.store.value(la.plan.layers[1].mlp[0].up_w).ptr());
    CHECK(&la.store.value(la.plan.layers[0].attn[0].wq) ==
          &la.store.value(la.plan.layers[1].attn[0].wq));
}

TEST_CASE("tied gradients equal the summed gradients of an untied clone") {
    ModelConfig lite_cfg = tiny_config(Variant::DiTAirLiteFull);
    ModelConfig clone_cfg = lite_cfg;
    clone_cfg.variant = Variant::DiTAir;
    Model<double> lite = build_model<double>(lite_cfg);
    Model<double> clone = build_model<double>(clone_cfg);
    randomize_params(lite, 43);

    // Copy values: same-named tensors directly, per-layer attention/MLP
    // slots from the lite model's shared tensors.
    auto lite_id = [&](const std::string& name) { return find_id(lite.plan, name); };
    for (size_t i = 0; i < clone.plan.params.size(); ++i) {
        std::string name = clone.plan.params[i].name;
        ParamId src = lite_id(name);
        if (src < 0) {
            const size_t dot = name.find('.');
            std::string suffix = name.substr(dot + 1);  // "attn.wq", "mlp.up.w"
            src = lite_id("shared." + suffix);
        }
        REQUIRE(src >= 0);
        clone.store.value(ParamId(i)) = lite.store.value(src);
    }

    Tensor<double> z = randn({2, 2, 4, 4}, 101);
    auto cb = random_cond(lite_cfg, 2, 102);
    Tensor<double> t({2});
    t[0] = 0.2;
    t[1] = 0.8;

    ForwardCache<double> lc, cc;
    Tensor<double> pl = forward<double>(lite, z, cb, t, &lc);
    Tensor<double> pc = forward<double>(clone, z, cb, t, &cc);
    CHECK(same_values(pl, pc));

    Tensor<double> dpred = randn({2, 2, 4, 4}, 103);
    lite.store.zero_grads();
    clone.store.zero_grads();
    backward(lite, dpred, lc);
    backward(clone, dpred, cc);

    const char* suffixes[] = {"attn.wq", "attn.bq", "attn.wk",     "attn.bk",
                              "attn.wv", "attn.bv", "attn.wo",     "attn.bo",
                              "attn.q_scale", "attn.k_scale", "mlp.up.w",
                              "mlp.up.b", "mlp.down.w", "mlp.down.b"};
    for (const char* sfx : suffixes) {
        const Tensor<double>& gl = lite.store.grad(lite_id(std::string("shared.") + sfx));
        const Tensor<double>& g0 =
            clone.store.grad(find_id(clone.plan, std::string("layer0.") + sfx));
        const Tensor<double>& g1 =
            clone.store.grad(find_id(clone.plan, std::string("layer1.") + sfx));
        for (int64_t i = 0; i < gl.size(); ++i) {
            const double want = g0[i] + g1[i];
            const double scale = std::max({std::abs(want), std::abs(gl[i]), 1e-8});
            CHECK(std::abs(gl[i] - want) / scale < 1e-6);
        }
    }

    // Tensors that are shared in both models get identical gradients.
    for (const char* name : {"shared.ada0.w", "shared.ada1.b", "patch.w", "head.w",
                             "cond.ctx.w", "time.w1"}) {
        const Tensor<double>& gl = lite.store.grad(lite_id(name));
        const Tensor<double>& gc = clone.store.grad(find_id(clone.plan, name));
        for (int64_t i = 0; i < gl.size(); ++i) {
            const double scale = std::max({std::abs(gl[i]), std::abs(gc[i]), 1e-8});
            CHECK(std::abs(gl[i] - gc[i]) / scale < 1e-6);
        }
    }
}

// =============================================================================
// Gradient certification
// =============================================================================

TEST_CASE("analytic gradients match finite differences for every variant") {
    for (Variant v : kAllVariants) {
        CAPTURE(variant_name(v));
        Model<double> m = build_model<double>(tiny_config(v));
        // Healthy weight scale: small inits push gradients of deep chains
        // under the checker's 1e-8 relative floor, where finite-difference
        // roundoff dominates any comparison.
        randomize_params(m, 47, 0.3);
        Tensor<double> z = randn({2, 2, 4, 4}, 111);
        auto cb = random_cond(m.cfg(), 2, 112);
        cb.null_mask[1] = 1;  // exercise the null-embedding path
        Tensor<double> t({2});
        t[0] = 0.3;
        t[1] = 0.7;
        Tensor<double> probe = randn({2, 2, 4, 4}, 113);

        auto loss = [&]() {
            Tensor<double> pred = forward<double>(m, z, cb, t, nullptr);
            double s = 0.0;
            for (int64_t i = 0; i < pred.size(); ++i) s += probe[i] * pred[i];
            return s;
        };

        m.store.zero_grads();
        ForwardCache<double> cache;
        forward<double>(m, z, cb, t, &cache);
        backward(m, probe, cache);

        std::vector<GradCheckItem> items;
        auto& es = m.store.entries();
        for (auto& e : es) items.push_back({e.name, &e.value, &e.grad});
        GradCheckResult r = grad_check(loss, items, 1e-4, 4, 1234);
        CAPTURE(r.worst);
        CHECK(r.max_rel_err < 1e-4);
        CHECK(r.coords_checked > 0);
    }
}

// =============================================================================
// Checkpointing
// =============================================================================

TEST_CASE("checkpoint round-trips a model bitwise") {
    // Payloads are f32, so a float store round-trips without loss.
    const std::string path = "arch_ckpt_test.bin";
    Model<float> m = build_model<float>(tiny_config(Variant::MMDiT));
    {
        auto& es = m.store.entries();
        for (size_t i = 0; i < es.size(); ++i) {
            Rng r(53, 1000 + i);
            r.fill_normal(es[i].value.ptr(), es[i].value.size(), 0.05);
        }
    }
    std::vector<float> saved;
    for (auto& e : m.store.entries())
        for (int64_t i = 0; i < e.value.size(); ++i) saved.push_back(e.value[i]);
    save_checkpoint(m.store, path);
    for (auto& e : m.store.entries()) e.value.fill(-1.0f);
    load_checkpoint(m.store, path);
    size_t k = 0;
    bool all_equal = true;
    for (auto& e : m.store.entries())
        for (int64_t i = 0; i < e.value.size(); ++i)
            all_equal = all_equal && (e.value[i] == saved[k++]);
    CHECK(all_equal);

    // A different architecture must refuse the file.
    Model<float> other = build_model<float>(tiny_config(Variant::DiTAir));
    CHECK_THROWS_AS(load_checkpoint(other.store, path), ConfigError);
    std::remove(path.c_str());
}
