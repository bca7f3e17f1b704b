#include "ditair/audit.hpp"

#include <iomanip>
#include <ostream>

namespace ditair {
namespace audit {

using arch::Variant;

// =============================================================================
// Closed forms
// =============================================================================

ComponentCounts expected_counts(Variant v, int64_t n_layers, int64_t d) {
    check(n_layers >= 1 && d >= 1, "expected_counts needs N >= 1, d >= 1");
    const int64_t d2 = d * d, N = n_layers;
    ComponentCounts c;
    switch (v) {
        case Variant::PixArt:
            c.adaln = 6 * d2;  // one shared single-stream table
            c.self_attn = 4 * N * d2;
            c.cross_attn = 4 * N * d2;
            c.mlp = 8 * N * d2;
            break;
        case Variant::MMDiT:
            c.adaln = 12 * N * d2;  // dual-stream, per layer
            c.self_attn = 8 * N * d2;
            c.mlp = 16 * N * d2;
            break;
        case Variant::MMDiTSharedAdaLN:
            c.adaln = 12 * d2;  // dual-stream, one shared set
            c.self_attn = 8 * N * d2;
            c.mlp = 16 * N * d2;
            break;
        case Variant::DiTAir:
            c.adaln = 12 * d2;
            c.self_attn = 4 * N * d2;
            c.mlp = 8 * N * d2;
            break;
        case Variant::DiTAirLiteFull:
            c.adaln = 12 * d2;  // whole block shared: depth-independent
            c.self_attn = 4 * d2;
            c.mlp = 8 * d2;
            break;
        case Variant::DiTAirLiteAttention:
            c.adaln = 12 * d2;
            c.self_attn = 4 * d2;  // shared QKVO, per-layer MLPs
            c.mlp = 8 * N * d2;
            break;
    }
    return c;
}

// =============================================================================
// Plan audit
// =============================================================================

int64_t AuditReport::overhead_total() const {
    int64_t n = 0;
    for (const auto& o : overhead) n += o.count;
    return n;
}

int64_t AuditReport::total_params() const { return actual.total() + overhead_total(); }

namespace {

bool starts_with(const std::string& s, const char* prefix) {
    return s.rfind(prefix, 0) == 0;
}

}  // namespace

AuditReport audit_plan(const arch::ModelPlan& plan, const std::string& size_label,
                       int64_t l_img) {
    AuditReport r;
    r.variant = plan.cfg.variant;
    r.size_label = size_label;
    r.n_layers = plan.cfg.n_layers;
    r.d = plan.cfg.d;
    r.expected = expected_counts(r.variant, r.n_layers, r.d);

    OverheadItem embed{"embedders", 0}, blocks{"blocks", 0}, head{"head", 0};
    for (const auto& p : plan.params) {
        const int64_t n = p.count();
        switch (p.component) {
            case Component::AdaLN: r.actual.adaln += n; break;
            case Component::SelfAttn: r.actual.self_attn += n; break;
            case Component::CrossAttn: r.actual.cross_attn += n; break;
            case Component::Mlp: r.actual.mlp += n; break;
            case Component::Overhead:
                if (starts_with(p.name, "patch.") || starts_with(p.name, "time.") ||
                    starts_with(p.name, "cond."))
                    embed.count += n;
                else if (starts_with(p.name, "head."))
                    head.count += n;
                else
                    blocks.count += n;
                break;
        }
    }
    r.overhead = {embed, blocks, head};

    auto verify = [&](const char* what, int64_t expected, int64_t actual) {
        if (expected != actual)
            throw AuditError(std::string("weight count mismatch in ") + what + ": expected " +
                             std::to_string(expected) + ", counted " +
                             std::to_string(actual));
    };
    verify("adaln", r.expected.adaln, r.actual.adaln);
    verify("self_attn", r.expected.self_attn, r.actual.self_attn);
    verify("cross_attn", r.expected.cross_attn, r.actual.cross_attn);
    verify("mlp", r.expected.mlp, r.actual.mlp);

    r.flops_per_forward =
        flops_estimate(r.variant, r.n_layers, r.d, plan.cfg.l_text, l_img);
    return r;
}

// =============================================================================
// FLOP model
// =============================================================================

int64_t flops_estimate(Variant v, int64_t n_layers, int64_t d, int64_t l_text,
                       int64_t l_img) {
    check(n_layers >= 1 && d >= 1 && l_text >= 0 && l_img >= 1,
          "flops_estimate needs positive sizes (l_text may be 0)");
    const int64_t d2 = d * d;
    int64_t per_layer = 0;
    if (v == Variant::PixArt) {
        per_layer += 4 * d2 * l_img + 2 * l_img * l_img * d;   // self over image
        per_layer += 2 * d2 * l_img + 2 * d2 * l_text;         // cross Q/O + K/V
        per_layer += 2 * l_img * l_text * d;                   // cross attention
        per_layer += 8 * d2 * l_img;                           // MLP
    } else {
        const int64_t L = l_text + l_img;
        per_layer = 4 * d2 * L + 2 * L * L * d + 8 * d2 * L;
    }
    return n_layers * per_layer;
}

// =============================================================================
// Published totals
// =============================================================================

int64_t reported_total(Variant v, const std::string& size) {
    if (size != "B") return 0;
    switch (v) {
        case Variant::MMDiT: return 902000000;
        case Variant::MMDiTSharedAdaLN: return 631000000;
        case Variant::DiTAir: return 321000000;
        case Variant::DiTAirLiteFull: return 49000000;
        case Variant::DiTAirLiteAttention: return 230000000;
        default: return 0;
    }
}

// =============================================================================
// Emission
// =============================================================================

void write_audit_csv(std::ostream& out, const std::vector<AuditReport>& reports) {
    out << "variant,size,component,expected,actual,overhead\n";
    for (const auto& r : reports) {
        const int64_t oh = r.overhead_total();
        const struct {
            const char* name;
            int64_t expected, actual;
        } rows[] = {
            {"adaln", r.expected.adaln, r.actual.adaln},
            {"self_attn", r.expected.self_attn, r.actual.self_attn},
            {"cross_attn", r.expected.cross_attn, r.actual.cross_attn},
            {"mlp", r.expected.mlp, r.actual.mlp},
        };
        for (const auto& row : rows)
            out << arch::variant_name(r.variant) << ',' << r.size_label << ','
                << row.name << ',' << row.expected << ',' << row.actual << ',' << oh
                << '\n';
    }
}

void print_audit_table(std::ostream& out, const AuditReport& r) {
    out << arch::variant_name(r.variant) << "/" << r.size_label << "  (layers "
        << r.n_layers << ", width " << r.d << ")\n";
    auto row = [&](const char* name, int64_t expected, int64_t actual) {
        out << "  " << std::left << std::setw(12) << name << std::right
            << std::setw(16) << expected << std::setw(16) << actual
            << (expected == actual ? "  ok" : "  MISMATCH") << "\n";
    };
    out << "  " << std::left << std::setw(12) << "component" << std::right
        << std::setw(16) << "expected" << std::setw(16) << "actual" << "\n";
    row("adaln", r.expected.adaln, r.actual.adaln);
    row("self_attn", r.expected.self_attn, r.actual.self_attn);
    row("cross_attn", r.expected.cross_attn, r.actual.cross_attn);
    row("mlp", r.expected.mlp, r.actual.mlp);
    out << "  " << std::left << std::setw(12) << "weights" << std::right
        << std::setw(16) << r.expected.total() << std::setw(16) << r.actual.total()
        << "\n";
    for (const auto& o : r.overhead)
        out << "  overhead/" << std::left << std::setw(11) << o.category
            << std::right << std::setw(32) << o.count << "\n";
    out << "  " << std::left << std::setw(12) << "total" << std::right
        << std::setw(32) << r.total_params() << "\n";
    const int64_t rep = reported_total(r.variant, r.size_label);
    if (rep > 0)
        out << "  reported " << rep << " -> reporting overhead "
            << rep - r.expected.total() << "\n";
    out << "  block MACs per forward: " << r.flops_per_forward << "\n";
}

}  // namespace audit
}  // namespace ditair
