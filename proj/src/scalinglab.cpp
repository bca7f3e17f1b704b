#include "ditair/scalinglab.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "ditair/audit.hpp"
#include "ditair/common.hpp"
#include "ditair/optim.hpp"
#include "ditair/parallel.hpp"
#include "ditair/sha1.hpp"

namespace ditair {
namespace scaling {

// =============================================================================
// Task construction
// =============================================================================

void validate(const TaskConfig& cfg) {
    if (cfg.n_classes < 1) throw ConfigError("task needs at least one class");
    if (cfg.latent_channels < 1 || cfg.grid < 1)
        throw ConfigError("latent dimensions must be positive");
    if (!(cfg.sigma > 0.0)) throw ConfigError("sigma must be > 0");
    if (cfg.l_text < 1 || cfg.d_enc < 1)
        throw ConfigError("context dimensions must be positive");
    if (cfg.val_items < 1) throw ConfigError("val_items must be >= 1");
    if (cfg.batch < 1) throw ConfigError("batch must be >= 1");
    if (!(cfg.lr > 0.0)) throw ConfigError("lr must be > 0");
    if (cfg.log_every < 1) throw ConfigError("log_every must be >= 1");
    if (!(cfg.tdist.s > 0.0)) throw ConfigError("timestep spread must be > 0");
}

template <typename T>
Task<T> make_task(const TaskConfig& cfg) {
    validate(cfg);
    Task<T> task;
    task.cfg = cfg;
    const int64_t K = cfg.n_classes;
    const int64_t row = cfg.latent_channels * cfg.grid * cfg.grid;

    Rng asset_rng(cfg.seed, 101);
    task.means = Tensor<T>(Shape{K, row});
    asset_rng.fill_normal(task.means.ptr(), task.means.size());
    task.ctx = Tensor<T>(Shape{K, cfg.l_text * cfg.d_enc});
    asset_rng.fill_normal(task.ctx.ptr(), task.ctx.size());
    task.pooled = Tensor<T>(Shape{K, cfg.d_enc});
    asset_rng.fill_normal(task.pooled.ptr(), task.pooled.size());

    // The validation set freezes class choices, samples and (eps, t) pairs.
    const int64_t V = cfg.val_items;
    Rng val_rng(cfg.seed, 102);
    task.val_class.resize(size_t(V));
    task.val_z0 = Tensor<T>(Shape{V, cfg.latent_channels, cfg.grid, cfg.grid});
    task.val_eps = Tensor<T>(task.val_z0.shape);
    task.val_t = Tensor<T>(Shape{V});
    for (int64_t i = 0; i < V; ++i) {
        const int64_t k = int64_t(val_rng.uniform_int(uint64_t(K)));
        task.val_class[size_t(i)] = k;
        for (int64_t j = 0; j < row; ++j)
            task.val_z0[i * row + j] =
                task.means[k * row + j] + T(cfg.sigma) * T(val_rng.normal());
        task.val_t[i] = T(flow::sample_timestep(cfg.tdist, val_rng));
    }
    val_rng.fill_normal(task.val_eps.ptr(), task.val_eps.size());
    return task;
}

namespace {

// Gathers per-class context features into a fixed-length CondBatch.
template <typename T>
cond::CondBatch<T> gather_cond(const Task<T>& task,
                               const std::vector<int64_t>& cls) {
    const TaskConfig& cfg = task.cfg;
    const int64_t B = int64_t(cls.size());
    const int64_t crow = cfg.l_text * cfg.d_enc;
    cond::CondBatch<T> cb;
    cb.batch = B;
    cb.l_text = cfg.l_text;
    cb.ctx = Tensor<T>(Shape{B * cfg.l_text, cfg.d_enc});
    cb.pooled = Tensor<T>(Shape{B, cfg.d_enc});
    cb.null_mask.assign(size_t(B), 0);
    for (int64_t i = 0; i < B; ++i) {
        const int64_t k = cls[size_t(i)];
        std::copy(task.ctx.ptr() + k * crow, task.ctx.ptr() + (k + 1) * crow,
                  cb.ctx.ptr() + i * crow);
        std::copy(task.pooled.ptr() + k * cfg.d_enc,
                  task.pooled.ptr() + (k + 1) * cfg.d_enc,
                  cb.pooled.ptr() + i * cfg.d_enc);
    }
    return cb;
}

}  // namespace

template <typename T>
double validation_loss(const arch::Model<T>& m, const Task<T>& task) {
    Tensor<T> z_t = flow::interpolate(task.val_z0, task.val_eps, task.val_t);
    cond::CondBatch<T> cb = gather_cond(task, task.val_class);
    Tensor<T> pred = arch::forward<T>(m, z_t, cb, task.val_t, nullptr);
    double acc = 0.0;
    for (int64_t i = 0; i < pred.size(); ++i) {
        const double d = double(pred[i]) -
                         (double(task.val_z0[i]) - double(task.val_eps[i]));
        acc += d * d;
    }
    return acc / double(pred.size());
}

// =============================================================================
// Training runs
// =============================================================================

std::string run_description(const arch::ModelConfig& mc, const TaskConfig& tc,
                            int64_t steps) {
    std::ostringstream os;
    os << std::setprecision(17);
    os << "variant=" << arch::variant_name(mc.variant)
       << "\nlayers=" << mc.n_layers << "\nd=" << mc.d
       << "\nheads=" << mc.heads << "\npatch=" << mc.patch
       << "\nlatent_channels=" << mc.latent_channels
       << "\nl_text=" << mc.l_text << "\nd_enc=" << mc.d_enc
       << "\ntime_dim=" << mc.time_dim
       << "\nuse_pooled=" << (mc.use_pooled ? 1 : 0)
       << "\nmodel_seed=" << mc.seed << "\nclasses=" << tc.n_classes
       << "\ngrid=" << tc.grid << "\nsigma=" << tc.sigma
       << "\ntdist_m=" << tc.tdist.m << "\ntdist_s=" << tc.tdist.s
       << "\nval_items=" << tc.val_items << "\ntask_seed=" << tc.seed
       << "\nbatch=" << tc.batch << "\nlr=" << tc.lr << "\nsteps=" << steps
       << "\n";
    return os.str();
}

template <typename T>
RunRecord train_run(const arch::ModelConfig& model_config,
                    const TaskConfig& task_config, int64_t steps, Rng& rng,
                    arch::Model<T>* trained) {
    arch::validate(model_config);
    validate(task_config);
    if (steps < 0) throw ConfigError("steps must be >= 0");
    if (model_config.latent_channels != task_config.latent_channels ||
        model_config.l_text != task_config.l_text ||
        model_config.d_enc != task_config.d_enc)
        throw ConfigError("model and task disagree on latent or context dims");

    arch::Model<T> m = arch::build_model<T>(model_config);
    Task<T> task = make_task<T>(task_config);

    RunRecord rec;
    rec.config_hash =
        git_blob_sha1(run_description(model_config, task_config, steps));
    rec.variant = arch::variant_name(model_config.variant);
    rec.n_layers = model_config.n_layers;
    rec.d = model_config.d;
    const int64_t l_img = (task_config.grid / model_config.patch) *
                          (task_config.grid / model_config.patch);
    rec.params = audit::audit_plan(m.plan, "custom", l_img).total_params();

    const TaskConfig& tc = task_config;
    const int64_t K = tc.n_classes;
    const int64_t row = tc.latent_channels * tc.grid * tc.grid;
    Adam<T> opt(m.store, AdamConfig{tc.lr, 0.9, 0.999, 1e-8});

    Tensor<T> z0(Shape{tc.batch, tc.latent_channels, tc.grid, tc.grid});
    std::vector<int64_t> cls(size_t(tc.batch));
    for (int64_t step = 1; step <= steps; ++step) {
        for (int64_t b = 0; b < tc.batch; ++b) {
            const int64_t k = int64_t(rng.uniform_int(uint64_t(K)));
            cls[size_t(b)] = k;
            for (int64_t j = 0; j < row; ++j)
                z0[b * row + j] =
                    task.means[k * row + j] + T(tc.sigma) * T(rng.normal());
        }
        cond::CondBatch<T> cb = gather_cond(task, cls);
        flow::FlowBatch<T> fb = flow::make_batch(z0, rng, tc.tdist);

        arch::ForwardCache<T> cache;
        Tensor<T> pred = arch::forward<T>(m, fb.z_t, cb, fb.t, &cache);
        const double loss = flow::flow_loss(pred, fb);
        // Normalization keeps runaway runs finite, so a loss far above the
        // zero-prediction baseline counts as divergence too.
        if (!std::isfinite(loss) || loss > 1e8)
            throw NumericError("scaling run diverged at step " +
                               std::to_string(step));
        Tensor<T> g = flow::flow_loss_grad(pred, fb);
        m.store.zero_grads();
        arch::backward(m, g, cache);
        opt.step(m.store);

        if (step % tc.log_every == 0 || step == steps)
            rec.train_curve.push_back(TrainPoint{step, loss});
    }
    rec.val_loss = validation_loss(m, task);
    if (trained) *trained = std::move(m);
    return rec;
}

// =============================================================================
// Power-law fitting
// =============================================================================

PowerLawFit fit_power_law(const std::vector<std::pair<double, double>>& pts) {
    if (pts.size() < 2)
        throw ConfigError("power-law fit needs at least two points");
    for (const auto& p : pts)
        if (!(p.first > 0.0) || !(p.second > 0.0))
            throw ConfigError("power-law fit needs positive sizes and losses");
    bool distinct = false;
    for (size_t i = 1; i < pts.size(); ++i)
        if (pts[i].first != pts[0].first) distinct = true;
    if (!distinct)
        throw ConfigError("power-law fit needs at least two distinct sizes");

    const double n = double(pts.size());
    double mx = 0.0, my = 0.0;
    for (const auto& p : pts) {
        mx += std::log(p.first);
        my += std::log(p.second);
    }
    mx /= n;
    my /= n;
    double sxx = 0.0, sxy = 0.0;
    for (const auto& p : pts) {
        const double dx = std::log(p.first) - mx;
        sxx += dx * dx;
        sxy += dx * (std::log(p.second) - my);
    }
    PowerLawFit fit;
    fit.b = sxy / sxx;
    const double log_a = my - fit.b * mx;
    fit.a = std::exp(log_a);
    double sse = 0.0;
    for (const auto& p : pts) {
        const double r =
            std::log(p.second) - (log_a + fit.b * std::log(p.first));
        sse += r * r;
    }
    fit.rms = std::sqrt(sse / n);
    return fit;
}

// =============================================================================
// Grid execution
// =============================================================================

template <typename T>
std::vector<RunRecord> run_grid(const std::vector<arch::Variant>& variants,
                                const std::vector<int64_t>& layer_grid,
                                const TaskConfig& task_config, int64_t steps,
                                int workers) {
    check(!variants.empty() && !layer_grid.empty(), "grid must be non-empty");

    struct Job {
        arch::ModelConfig mc;
        uint64_t stream = 0;
    };
    std::vector<Job> jobs;
    for (const arch::Variant v : variants)
        for (const int64_t layers : layer_grid) {
            arch::ModelConfig mc;
            mc.variant = v;
            mc.n_layers = layers;
            mc.d = 32 * layers;
            mc.heads = layers;
            mc.patch = 2;
            mc.latent_channels = task_config.latent_channels;
            mc.l_text = task_config.l_text;
            mc.d_enc = task_config.d_enc;
            mc.time_dim = 64;
            mc.seed = task_config.seed * 1000003 + uint64_t(jobs.size());
            jobs.push_back(Job{mc, 7000 + uint64_t(jobs.size())});
        }

    int pool = workers > 0 ? workers : thread_count();
    if (pool > int(jobs.size())) pool = int(jobs.size());
    if (pool < 1) pool = 1;

    std::vector<RunRecord> records(jobs.size());
    std::vector<std::exception_ptr> errors(jobs.size());
    std::atomic<size_t> next{0};
    auto work = [&]() {
        for (;;) {
            const size_t i = next.fetch_add(1);
            if (i >= jobs.size()) return;
            try {
                Rng rng(task_config.seed, jobs[i].stream);
                records[i] =
                    train_run<T>(jobs[i].mc, task_config, steps, rng);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    };
    if (pool == 1) {
        work();
    } else {
        std::vector<std::thread> threads;
        threads.reserve(size_t(pool));
        for (int w = 0; w < pool; ++w) threads.emplace_back(work);
        for (auto& t : threads) t.join();
    }
    for (const auto& e : errors)
        if (e) std::rethrow_exception(e);

    // Scheduling must not leak into the output: merge in hash order.
    std::sort(records.begin(), records.end(),
              [](const RunRecord& a, const RunRecord& b) {
                  return a.config_hash < b.config_hash;
              });
    return records;
}

// =============================================================================
// Reports
// =============================================================================

namespace {

struct ChartGroup {
    std::string variant;
    std::vector<std::pair<double, double>> pts;  // (S, L)
};

std::vector<ChartGroup> group_by_variant(const std::vector<RunRecord>& recs) {
    std::vector<ChartGroup> groups;
    for (const auto& r : recs) {
        ChartGroup* g = nullptr;
        for (auto& c : groups)
            if (c.variant == r.variant) g = &c;
        if (!g) {
            groups.push_back(ChartGroup{r.variant, {}});
            g = &groups.back();
        }
        g->pts.emplace_back(double(r.params), r.val_loss);
    }
    return groups;
}

bool has_two_distinct_sizes(const ChartGroup& g) {
    for (size_t i = 1; i < g.pts.size(); ++i)
        if (g.pts[i].first != g.pts[0].first) return true;
    return false;
}

const char* kPalette[6] = {"#4477aa", "#ee6677", "#228833",
                           "#ccbb44", "#66ccee", "#aa3377"};

void write_svg(const std::vector<ChartGroup>& groups,
               const std::vector<std::pair<std::string, PowerLawFit>>& fits,
               const std::string& path) {
    double smin = 1e300, smax = -1e300, lmin = 1e300, lmax = -1e300;
    for (const auto& g : groups)
        for (const auto& p : g.pts) {
            smin = std::min(smin, std::log10(p.first));
            smax = std::max(smax, std::log10(p.first));
            lmin = std::min(lmin, std::log10(p.second));
            lmax = std::max(lmax, std::log10(p.second));
        }
    if (smax - smin < 1e-9) {
        smin -= 0.5;
        smax += 0.5;
    }
    if (lmax - lmin < 1e-9) {
        lmin -= 0.5;
        lmax += 0.5;
    }
    const double W = 640, H = 480, ml = 70, mr = 20, mt = 20, mb = 50;
    auto X = [&](double logs) {
        return ml + (logs - smin) / (smax - smin) * (W - ml - mr);
    };
    auto Y = [&](double logl) {
        return H - mb - (logl - lmin) / (lmax - lmin) * (H - mt - mb);
    };

    std::ofstream f(path);
    if (!f) throw ConfigError("cannot write svg: " + path);
    f << std::setprecision(8);
    f << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W
      << "\" height=\"" << H << "\" viewBox=\"0 0 " << W << ' ' << H
      << "\">\n";
    f << "<rect width=\"" << W << "\" height=\"" << H
      << "\" fill=\"white\"/>\n";
    f << "<line x1=\"" << ml << "\" y1=\"" << H - mb << "\" x2=\"" << W - mr
      << "\" y2=\"" << H - mb << "\" stroke=\"black\"/>\n";
    f << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml
      << "\" y2=\"" << H - mb << "\" stroke=\"black\"/>\n";
    f << "<text x=\"" << (ml + W - mr) / 2 << "\" y=\"" << H - 12
      << "\" text-anchor=\"middle\" font-size=\"13\">parameters "
         "(log10)</text>\n";
    f << "<text x=\"16\" y=\"" << (mt + H - mb) / 2
      << "\" text-anchor=\"middle\" font-size=\"13\" transform=\"rotate(-90 "
         "16 "
      << (mt + H - mb) / 2 << ")\">validation loss (log10)</text>\n";

    for (double tick = std::ceil(smin); tick <= std::floor(smax) + 1e-9;
         tick += 1.0) {
        f << "<line x1=\"" << X(tick) << "\" y1=\"" << H - mb << "\" x2=\""
          << X(tick) << "\" y2=\"" << H - mb + 5 << "\" stroke=\"black\"/>\n";
        f << "<text x=\"" << X(tick) << "\" y=\"" << H - mb + 18
          << "\" text-anchor=\"middle\" font-size=\"11\">1e" << int(tick)
          << "</text>\n";
    }

    size_t ci = 0;
    double ly = mt + 14;
    for (const auto& g : groups) {
        const char* color = kPalette[ci % 6];
        for (const auto& fit : fits)
            if (fit.first == g.variant) {
                // log10 L = log10 a + b * log10 S: straight in this chart.
                const double la = std::log10(fit.second.a);
                const double ya = la + fit.second.b * smin;
                const double yb = la + fit.second.b * smax;
                f << "<line x1=\"" << X(smin) << "\" y1=\"" << Y(ya)
                  << "\" x2=\"" << X(smax) << "\" y2=\"" << Y(yb)
                  << "\" stroke=\"" << color
                  << "\" stroke-width=\"1.5\" stroke-dasharray=\"5 3\"/>\n";
            }
        for (const auto& p : g.pts)
            f << "<circle cx=\"" << X(std::log10(p.first)) << "\" cy=\""
              << Y(std::log10(p.second)) << "\" r=\"4\" fill=\"" << color
              << "\"/>\n";
        f << "<text x=\"" << W - mr - 8 << "\" y=\"" << ly
          << "\" text-anchor=\"end\" font-size=\"12\" fill=\"" << color
          << "\">" << g.variant << "</text>\n";
        ly += 16;
        ++ci;
    }
    f << "</svg>\n";
    if (!f) throw ConfigError("failed writing svg: " + path);
}

}  // namespace

std::vector<std::pair<std::string, PowerLawFit>> emit_report(
    const std::vector<RunRecord>& records, const std::string& out_dir) {
    check(!records.empty(), "report needs at least one record");
    std::filesystem::create_directories(out_dir);

    {
        std::ofstream f(out_dir + "/runs.csv");
        if (!f) throw ConfigError("cannot write runs csv in " + out_dir);
        f << "variant,layers,d,params,val_loss\n" << std::setprecision(17);
        for (const auto& r : records)
            f << r.variant << ',' << r.n_layers << ',' << r.d << ','
              << r.params << ',' << r.val_loss << '\n';
    }

    const std::vector<ChartGroup> groups = group_by_variant(records);
    std::vector<std::pair<std::string, PowerLawFit>> fits;
    for (const auto& g : groups)
        if (g.pts.size() >= 2 && has_two_distinct_sizes(g))
            fits.emplace_back(g.variant, fit_power_law(g.pts));

    {
        std::ofstream f(out_dir + "/fits.csv");
        if (!f) throw ConfigError("cannot write fits csv in " + out_dir);
        f << "variant,a,b,rms\n" << std::setprecision(17);
        for (const auto& p : fits)
            f << p.first << ',' << p.second.a << ',' << p.second.b << ','
              << p.second.rms << '\n';
    }

    write_svg(groups, fits, out_dir + "/scaling.svg");
    return fits;
}

std::vector<RunRecord> read_runs_csv(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot read runs csv: " + path);
    std::string line;
    if (!std::getline(f, line) || line != "variant,layers,d,params,val_loss")
        throw ConfigError("unexpected runs csv header in " + path);
    std::vector<RunRecord> out;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::istringstream is(line);
        RunRecord r;
        std::string field;
        try {
            size_t pos = 0;
            if (!std::getline(is, r.variant, ',')) throw ConfigError("");
            if (!std::getline(is, field, ',')) throw ConfigError("");
            r.n_layers = std::stoll(field, &pos);
            if (pos != field.size()) throw ConfigError("");
            if (!std::getline(is, field, ',')) throw ConfigError("");
            r.d = std::stoll(field, &pos);
            if (pos != field.size()) throw ConfigError("");
            if (!std::getline(is, field, ',')) throw ConfigError("");
            r.params = std::stoll(field, &pos);
            if (pos != field.size()) throw ConfigError("");
            if (!std::getline(is, field)) throw ConfigError("");
            r.val_loss = std::stod(field, &pos);
            if (pos != field.size()) throw ConfigError("");
        } catch (const std::exception&) {
            throw ConfigError("malformed runs csv row: " + line);
        }
        out.push_back(std::move(r));
    }
    return out;
}

// =============================================================================
// Instantiations
// =============================================================================

#define DITAIR_SCALING_INSTANTIATE(T)                                         \
    template Task<T> make_task<T>(const TaskConfig&);                         \
    template double validation_loss<T>(const arch::Model<T>&,                 \
                                       const Task<T>&);                       \
    template RunRecord train_run<T>(const arch::ModelConfig&,                 \
                                    const TaskConfig&, int64_t, Rng&,         \
                                    arch::Model<T>*);                         \
    template std::vector<RunRecord> run_grid<T>(                              \
        const std::vector<arch::Variant>&, const std::vector<int64_t>&,       \
        const TaskConfig&, int64_t, int);

DITAIR_SCALING_INSTANTIATE(float)
DITAIR_SCALING_INSTANTIATE(double)
#undef DITAIR_SCALING_INSTANTIATE

}  // namespace scaling
}  // namespace ditair
