#pragma once

#include <string>
#include <vector>

#include "ditair/rng.hpp"
#include "ditair/tensor.hpp"

namespace ditair {

// Accounting bucket for parameter-count audits. Only transformer block
// weight matrices land in the first four buckets; biases, norm scales,
// embedders and output heads are all Overhead.
enum class Component { AdaLN, SelfAttn, CrossAttn, Mlp, Overhead };

inline const char* component_name(Component c) {
    switch (c) {
        case Component::AdaLN: return "adaln";
        case Component::SelfAttn: return "self_attn";
        case Component::CrossAttn: return "cross_attn";
        case Component::Mlp: return "mlp";
        case Component::Overhead: return "overhead";
    }
    return "?";
}

enum class InitKind {
    Zero,
    Constant,  // every element = value
    Normal,    // N(0, value^2)
};

struct InitSpec {
    InitKind kind = InitKind::Zero;
    double value = 0.0;

    static InitSpec zero() { return {InitKind::Zero, 0.0}; }
    static InitSpec constant(double v) { return {InitKind::Constant, v}; }
    static InitSpec normal(double std) { return {InitKind::Normal, std}; }
};

// One unique parameter tensor: what it is called, its shape, which audit
// bucket it belongs to, and how to initialize it. A model that shares a
// tensor across layers lists it here exactly once; the layer wiring refers
// back by index. The plan order is canonical: it fixes checkpoint layout
// and the draw stream used to initialize each tensor.
struct ParamPlan {
    std::string name;
    Shape shape;
    Component component = Component::Overhead;
    InitSpec init;

    int64_t count() const { return numel(shape); }
};

using ParamId = int32_t;

template <typename T>
class ParamStore {
public:
    struct Entry {
        std::string name;
        Component component;
        Tensor<T> value;
        Tensor<T> grad;
    };

    // Materializes one planned tensor. The rng is split off per entry by the
    // caller so the realized values do not depend on construction order of
    // anything else.
    ParamId add(const ParamPlan& plan, Rng rng) {
        Entry e;
        e.name = plan.name;
        e.component = plan.component;
        e.value = Tensor<T>(plan.shape);
        e.grad = Tensor<T>(plan.shape);
        switch (plan.init.kind) {
            case InitKind::Zero:
                break;
            case InitKind::Constant:
                e.value.fill(static_cast<T>(plan.init.value));
                break;
            case InitKind::Normal:
                rng.fill_normal(e.value.ptr(), e.value.size(), plan.init.value);
                break;
        }
        entries_.push_back(std::move(e));
        return static_cast<ParamId>(entries_.size() - 1);
    }

    Tensor<T>& value(ParamId id) { return entries_[static_cast<size_t>(id)].value; }
    const Tensor<T>& value(ParamId id) const { return entries_[static_cast<size_t>(id)].value; }
    Tensor<T>& grad(ParamId id) { return entries_[static_cast<size_t>(id)].grad; }
    const Tensor<T>& grad(ParamId id) const { return entries_[static_cast<size_t>(id)].grad; }
    const std::string& name(ParamId id) const { return entries_[static_cast<size_t>(id)].name; }
    Component component(ParamId id) const { return entries_[static_cast<size_t>(id)].component; }

    int64_t count() const { return static_cast<int64_t>(entries_.size()); }

    std::vector<Entry>& entries() { return entries_; }
    const std::vector<Entry>& entries() const { return entries_; }

    void zero_grads() {
        for (auto& e : entries_) e.grad.zero();
    }

    int64_t total_params() const {
        int64_t n = 0;
        for (const auto& e : entries_) n += e.value.size();
        return n;
    }

private:
    std::vector<Entry> entries_;
};

}  // namespace ditair
