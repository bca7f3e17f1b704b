#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "ditair/arch.hpp"

namespace ditair {
namespace audit {

// =============================================================================
// Closed-form weight counts
// =============================================================================
//
// The four weight buckets cover the matrices inside transformer blocks:
// modulation projections, self-attention QKVO, cross-attention QKVO and MLP
// up/down. Everything else a model carries (patch/time/text embedders,
// biases, norm scales, gates, the output head) is overhead and reported
// separately, so the bucket laws stay exact integer identities.

struct ComponentCounts {
    int64_t adaln = 0;
    int64_t self_attn = 0;
    int64_t cross_attn = 0;
    int64_t mlp = 0;

    int64_t total() const { return adaln + self_attn + cross_attn + mlp; }
};

// Weight-bucket laws per variant as functions of depth N and width d:
//   pixart             (6 + 16N) d^2
//   mmdit              36N d^2
//   mmdit_shared_adaln (12 + 24N) d^2
//   dit_air            (12 + 12N) d^2
//   dit_air_lite_full  24 d^2
//   dit_air_lite_attn  (16 + 8N) d^2
ComponentCounts expected_counts(arch::Variant v, int64_t n_layers, int64_t d);

// =============================================================================
// Model audits
// =============================================================================

struct OverheadItem {
    std::string category;  // "embedders", "blocks", "head"
    int64_t count = 0;
};

struct AuditReport {
    arch::Variant variant = arch::Variant::DiTAir;
    std::string size_label;  // preset letter or "custom"
    int64_t n_layers = 0;
    int64_t d = 0;
    ComponentCounts expected;
    ComponentCounts actual;
    std::vector<OverheadItem> overhead;
    int64_t flops_per_forward = 0;  // block MACs for (l_text, l_img) of the config

    int64_t overhead_total() const;
    // actual.total() + overhead_total(): every parameter the model owns.
    int64_t total_params() const;
};

// Counts a parameter plan. Shape-only, so even the largest presets audit in
// microseconds. Throws AuditError naming the first bucket whose count
// disagrees with its closed form.
AuditReport audit_plan(const arch::ModelPlan& plan,
                       const std::string& size_label = "custom",
                       int64_t l_img = 256);

template <typename T>
AuditReport audit_model(const arch::Model<T>& m,
                        const std::string& size_label = "custom",
                        int64_t l_img = 256) {
    return audit_plan(m.plan, size_label, l_img);
}

// =============================================================================
// FLOP model
// =============================================================================
//
// MACs per forward through the blocks, batch 1, softmax and norms excluded:
// every token pays 4d^2 for its QKVO pass and 8d^2 for its MLP; joint
// attention pays 2 L^2 d per layer. PixArt self-attends over image tokens
// only and adds a cross pass: 2d^2 per image token (Q and O), 2d^2 per text
// token (K and V), and 2 * l_img * l_text * d attention MACs.
int64_t flops_estimate(arch::Variant v, int64_t n_layers, int64_t d,
                       int64_t l_text, int64_t l_img);

// =============================================================================
// Published-total reconciliation
// =============================================================================

// Reported rounded totals for size B configurations; 0 when no figure is
// published for the pair. These include each model's overhead, so
// reported - formula isolates the overhead the reporting included.
int64_t reported_total(arch::Variant v, const std::string& size);

// =============================================================================
// Emission
// =============================================================================

// CSV schema: variant,size,component,expected,actual,overhead. One row per
// bucket; the overhead column repeats the model's overhead total.
void write_audit_csv(std::ostream& out, const std::vector<AuditReport>& reports);

void print_audit_table(std::ostream& out, const AuditReport& r);

}  // namespace audit
}  // namespace ditair
