#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ditair/arch.hpp"
#include "ditair/flow.hpp"
#include "ditair/rng.hpp"
#include "ditair/tensor.hpp"

namespace ditair {
namespace scaling {

// =============================================================================
// Synthetic conditional task
// =============================================================================
//
// Latents are conditional Gaussians: a class id selects a fixed mean pattern
// and samples scatter around it with spread sigma. The class id enters the
// model through fixed per-class context tokens. Because the posterior is
// Gaussian, the best achievable flow loss is computable in closed form
// (expected_min_loss), giving training runs an absolute quality scale.

struct TaskConfig {
    int64_t n_classes = 8;
    int64_t latent_channels = 4;
    int64_t grid = 8;       // latent height = width
    double sigma = 0.5;     // within-class spread
    int64_t l_text = 4;
    int64_t d_enc = 16;
    int64_t val_items = 256;
    int64_t batch = 32;
    double lr = 3e-4;
    int64_t log_every = 100;
    uint64_t seed = 0;
    flow::TimestepDist tdist;
};

// Positive sizes, sigma > 0, batch/val/log sanity; violations throw
// ConfigError.
void validate(const TaskConfig& cfg);

// Fixed task assets: per-class means and context features plus a frozen
// validation set with pre-drawn (eps, t) pairs so evaluation is a pure
// function of the parameters.
template <typename T>
struct Task {
    TaskConfig cfg;
    Tensor<T> means;        // [K, c * g * g]
    Tensor<T> ctx;          // [K, l_text * d_enc]
    Tensor<T> pooled;       // [K, d_enc]
    std::vector<int64_t> val_class;
    Tensor<T> val_z0;       // [V, c, g, g]
    Tensor<T> val_eps;      // [V, c, g, g]
    Tensor<T> val_t;        // [V]
};

template <typename T>
Task<T> make_task(const TaskConfig& cfg);

// Mean squared error of the model's prediction against z0 - eps on the
// frozen validation set. Deterministic given the parameters.
template <typename T>
double validation_loss(const arch::Model<T>& m, const Task<T>& task);

// =============================================================================
// Training runs
// =============================================================================

struct TrainPoint {
    int64_t step = 0;
    double loss = 0.0;
};

struct RunRecord {
    std::string config_hash;  // hex digest of the canonical run description
    std::string variant;
    int64_t n_layers = 0;
    int64_t d = 0;
    int64_t params = 0;       // audited size: weight buckets plus overhead
    std::vector<TrainPoint> train_curve;
    double val_loss = 0.0;
};

// Canonical textual description of a run; its git-blob hash is the record's
// config_hash and the deterministic merge key for grids.
std::string run_description(const arch::ModelConfig& mc, const TaskConfig& tc,
                            int64_t steps);

// Adam on the flow-matching loss over freshly sampled conditional batches.
// The model is built from model_config (its own seed), the batch stream
// comes from rng, and the audited parameter count lands in `params`.
// A non-finite or runaway loss aborts with NumericError naming the step.
// When `trained` is non-null the final model is moved into it so callers
// can checkpoint or keep sampling from it.
template <typename T>
RunRecord train_run(const arch::ModelConfig& model_config,
                    const TaskConfig& task_config, int64_t steps, Rng& rng,
                    arch::Model<T>* trained = nullptr);

// =============================================================================
// Power-law fitting
// =============================================================================

struct PowerLawFit {
    double a = 0.0;   // coefficient, > 0
    double b = 0.0;   // exponent
    double rms = 0.0; // residual RMS in log space
};

// Least squares of log L on log S for L = a * S^b. Requires >= 2 points with
// at least 2 distinct sizes and strictly positive S and L; violations throw
// ConfigError.
PowerLawFit fit_power_law(const std::vector<std::pair<double, double>>& pts);

// =============================================================================
// Grid execution
// =============================================================================

// One model per (variant, layers) cell with d = 32 * layers and one head per
// layer-count. Cells train in a worker pool (worker count from thread_count,
// capped by `workers` when positive); finished records are merged in
// config-hash order, so the output is independent of scheduling.
template <typename T>
std::vector<RunRecord> run_grid(const std::vector<arch::Variant>& variants,
                                const std::vector<int64_t>& layer_grid,
                                const TaskConfig& task_config, int64_t steps,
                                int workers = 0);

// =============================================================================
// Reports
// =============================================================================

// Writes runs.csv (variant,layers,d,params,val_loss), fits.csv
// (variant,a,b,rms) and scaling.svg (log-log chart, one circle per record)
// into out_dir, creating the directory when missing. Returns the fits in
// variant order of first appearance.
std::vector<std::pair<std::string, PowerLawFit>> emit_report(
    const std::vector<RunRecord>& records, const std::string& out_dir);

// Reads a runs.csv produced by emit_report (or by hand) back into records;
// malformed rows throw ConfigError.
std::vector<RunRecord> read_runs_csv(const std::string& path);

}  // namespace scaling
}  // namespace ditair
