#include "ditair/cli.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "ditair/arch.hpp"
#include "ditair/audit.hpp"
#include "ditair/checkpoint.hpp"
#include "ditair/conditioning.hpp"
#include "ditair/sampler.hpp"
#include "ditair/scalinglab.hpp"
#include "ditair/sha1.hpp"
#include "ditair/vaetoy.hpp"

namespace ditair {
namespace cli {

namespace fs = std::filesystem;

// =============================================================================
// Config files
// =============================================================================

namespace {

std::string trim(const std::string& s) {
    size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return s.substr(a, b - a);
}

}  // namespace

Config parse_config_text(const std::string& text) {
    Config cfg;
    std::istringstream is(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const size_t hash = line.find_first_of("#;");
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']' || line.size() < 3)
                throw ConfigError("bad section header at line " +
                                  std::to_string(lineno) + ": " + line);
            section = trim(line.substr(1, line.size() - 2));
            cfg[section];  // an empty section is legal
            continue;
        }
        const size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("expected key = value at line " +
                              std::to_string(lineno) + ": " + line);
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty())
            throw ConfigError("empty key at line " + std::to_string(lineno));
        if (section.empty())
            throw ConfigError("key outside any section at line " +
                              std::to_string(lineno) + ": " + key);
        if (cfg[section].count(key))
            throw ConfigError("duplicate key " + section + "." + key +
                              " at line " + std::to_string(lineno));
        cfg[section][key] = value;
    }
    return cfg;
}

Config parse_config_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot read config file: " + path);
    std::ostringstream os;
    os << f.rdbuf();
    return parse_config_text(os.str());
}

std::string serialize_config(const Config& cfg) {
    std::ostringstream os;
    bool first = true;
    for (const auto& sec : cfg) {
        if (!first) os << '\n';
        first = false;
        os << '[' << sec.first << "]\n";
        for (const auto& kv : sec.second)
            os << kv.first << " = " << kv.second << '\n';
    }
    return os.str();
}

// =============================================================================
// Schemas and defaults
// =============================================================================

namespace {

const std::vector<std::string> kSubcommands = {"audit", "train", "sample",
                                               "fit-scaling", "vae"};

Section run_defaults() { return {{"seed", "0"}, {"input", ""}}; }

Section model_defaults() {
    return {{"variant", "dit_air"},
            {"size", ""},
            {"layers", "2"},
            {"d", "64"},
            {"heads", "2"},
            {"patch", "2"},
            {"latent_channels", "4"},
            {"l_text", "4"},
            {"d_enc", "16"},
            {"time_dim", "64"},
            {"use_pooled", "1"},
            {"model_seed", "0"}};
}

Section task_defaults() {
    return {{"classes", "8"},
            {"latent_channels", "4"},
            {"grid", "8"},
            {"sigma", "0.5"},
            {"l_text", "4"},
            {"d_enc", "16"},
            {"val_items", "256"},
            {"batch", "32"},
            {"lr", "3e-4"},
            {"log_every", "100"},
            {"tdist_m", "0"},
            {"tdist_s", "1"},
            {"task_seed", "0"}};
}

}  // namespace

Config default_config(const std::string& subcommand) {
    Config cfg;
    cfg["run"] = run_defaults();
    if (subcommand == "audit") {
        cfg["model"] = model_defaults();
    } else if (subcommand == "sample") {
        cfg["model"] = model_defaults();
        cfg["sample"] = {{"steps", "50"},
                         {"cfg", "7.5"},
                         {"churn", "0"},
                         {"grid", "8"},
                         {"tokens", "1 2 3 4"}};
        cfg["encoder"] = {{"vocab", "64"},
                          {"enc_layers", "2"},
                          {"mode", "bidirectional"},
                          {"enc_seed", "0"}};
    } else if (subcommand == "train") {
        cfg["model"] = model_defaults();
        cfg["task"] = task_defaults();
        cfg["train"] = {{"steps", "300"}};
    } else if (subcommand == "fit-scaling") {
        cfg["task"] = task_defaults();
        cfg["grid"] = {{"variants", "pixart,mmdit,dit_air"},
                       {"layers", "1,2"},
                       {"steps", "200"},
                       {"workers", "0"}};
    } else if (subcommand == "vae") {
        cfg["vae"] = {{"compression", "4"}, {"c1", "4"},
                      {"c2", "8"},          {"beta", "1e-3"},
                      {"stage", "1"},       {"steps", "250"},
                      {"batch", "16"},      {"lr", "1e-3"},
                      {"log_every", "25"},  {"vae_seed", "0"},
                      {"textures", "96"},   {"tex", "16"},
                      {"data_seed", "7"}};
    } else {
        throw ConfigError("unknown subcommand: " + subcommand);
    }
    return cfg;
}

// =============================================================================
// Argument parsing
// =============================================================================

namespace {

// Where --steps lands for each subcommand.
std::string steps_target(const std::string& sub) {
    if (sub == "sample") return "sample.steps";
    if (sub == "train") return "train.steps";
    if (sub == "fit-scaling") return "grid.steps";
    if (sub == "vae") return "vae.steps";
    throw ConfigError("--steps is not valid for " + sub);
}

std::pair<std::string, std::string> split_key(const std::string& dotted) {
    const size_t dot = dotted.find('.');
    if (dot == std::string::npos || dot == 0 || dot + 1 >= dotted.size())
        throw ConfigError("override key must look like section.key: " +
                          dotted);
    return {dotted.substr(0, dot), dotted.substr(dot + 1)};
}

}  // namespace

Invocation parse_argv(const std::vector<std::string>& args) {
    if (args.empty())
        throw ConfigError("missing subcommand (audit, train, sample, "
                          "fit-scaling, vae)");
    Invocation inv;
    inv.subcommand = args[0];
    if (inv.subcommand == "--help" || inv.subcommand == "-h") {
        inv.help = true;
        return inv;
    }
    if (std::find(kSubcommands.begin(), kSubcommands.end(), inv.subcommand) ==
        kSubcommands.end())
        throw ConfigError("unknown subcommand: " + inv.subcommand);

    auto need_value = [&](size_t& i, const std::string& flag) {
        if (i + 1 >= args.size())
            throw ConfigError("flag " + flag + " needs a value");
        return args[++i];
    };
    for (size_t i = 1; i < args.size(); ++i) {
        const std::string& a = args[i];
        if (a == "--help" || a == "-h") {
            inv.help = true;
        } else if (a == "--config") {
            inv.config_path = need_value(i, a);
        } else if (a == "--out") {
            inv.out_dir = need_value(i, a);
        } else if (a == "--seed") {
            inv.overrides.emplace_back("run.seed", need_value(i, a));
        } else if (a == "--input") {
            inv.overrides.emplace_back("run.input", need_value(i, a));
        } else if (a == "--variant") {
            inv.overrides.emplace_back("model.variant", need_value(i, a));
        } else if (a == "--size") {
            inv.overrides.emplace_back("model.size", need_value(i, a));
        } else if (a == "--steps") {
            inv.overrides.emplace_back(steps_target(inv.subcommand),
                                       need_value(i, a));
        } else if (a == "--cfg") {
            if (inv.subcommand != "sample")
                throw ConfigError("--cfg is only valid for sample");
            inv.overrides.emplace_back("sample.cfg", need_value(i, a));
        } else if (a == "--stage") {
            if (inv.subcommand != "vae")
                throw ConfigError("--stage is only valid for vae");
            inv.overrides.emplace_back("vae.stage", need_value(i, a));
        } else if (a.rfind("--", 0) == 0) {
            throw ConfigError("unknown flag: " + a);
        } else if (a.find('=') != std::string::npos) {
            const size_t eq = a.find('=');
            const auto sk = split_key(a.substr(0, eq));
            inv.overrides.emplace_back(sk.first + "." + sk.second,
                                       a.substr(eq + 1));
        } else {
            throw ConfigError("unexpected argument: " + a);
        }
    }
    if (inv.out_dir.empty()) inv.out_dir = "ditair_out";
    return inv;
}

// =============================================================================
// Typed access
// =============================================================================

namespace {

const std::string& raw(const Config& cfg, const std::string& sec,
                       const std::string& key) {
    return cfg.at(sec).at(key);
}

int64_t get_i64(const Config& cfg, const std::string& sec,
                const std::string& key) {
    const std::string& v = raw(cfg, sec, key);
    try {
        size_t pos = 0;
        const int64_t x = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ConfigError("bad integer for " + sec + "." + key + ": '" + v +
                          "'");
    }
}

uint64_t get_u64(const Config& cfg, const std::string& sec,
                 const std::string& key) {
    const std::string& v = raw(cfg, sec, key);
    try {
        size_t pos = 0;
        const uint64_t x = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ConfigError("bad unsigned integer for " + sec + "." + key +
                          ": '" + v + "'");
    }
}

double get_f64(const Config& cfg, const std::string& sec,
               const std::string& key) {
    const std::string& v = raw(cfg, sec, key);
    try {
        size_t pos = 0;
        const double x = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ConfigError("bad number for " + sec + "." + key + ": '" + v +
                          "'");
    }
}

bool get_bool(const Config& cfg, const std::string& sec,
              const std::string& key) {
    const std::string& v = raw(cfg, sec, key);
    if (v == "1" || v == "true") return true;
    if (v == "0" || v == "false") return false;
    throw ConfigError("bad boolean for " + sec + "." + key + ": '" + v + "'");
}

// =============================================================================
// Resolution
// =============================================================================

// Overlays file and override values onto the defaults, rejecting keys the
// subcommand does not define. [invocation] and [inputs] are manifest
// metadata: the former must agree with the current subcommand, the latter
// carries the expected input hash out to the caller.
struct Resolved {
    Config cfg;
    std::string expected_input_sha1;
};

Resolved resolve(const std::string& sub, const Invocation& inv) {
    Resolved r;
    r.cfg = default_config(sub);
    auto assign = [&](const std::string& sec, const std::string& key,
                      const std::string& value) {
        auto s = r.cfg.find(sec);
        if (s == r.cfg.end() || !s->second.count(key))
            throw ConfigError("unknown key " + sec + "." + key + " for " +
                              sub);
        s->second[key] = value;
    };
    if (!inv.config_path.empty()) {
        const Config file = parse_config_file(inv.config_path);
        for (const auto& sec : file) {
            if (sec.first == "invocation") {
                for (const auto& kv : sec.second) {
                    if (kv.first != "subcommand")
                        throw ConfigError("unknown key invocation." +
                                          kv.first);
                    if (kv.second != sub)
                        throw ConfigError("config was written for '" +
                                          kv.second + "', not '" + sub + "'");
                }
                continue;
            }
            if (sec.first == "inputs") {
                for (const auto& kv : sec.second) {
                    if (kv.first != "input_sha1")
                        throw ConfigError("unknown key inputs." + kv.first);
                    r.expected_input_sha1 = kv.second;
                }
                continue;
            }
            for (const auto& kv : sec.second)
                assign(sec.first, kv.first, kv.second);
        }
    }
    for (const auto& ov : inv.overrides) {
        const auto sk = split_key(ov.first);
        assign(sk.first, sk.second, ov.second);
    }
    return r;
}

// =============================================================================
// Small output helpers
// =============================================================================

std::string group3(int64_t n) {
    std::string digits = std::to_string(n);
    std::string out;
    int count = 0;
    for (size_t i = digits.size(); i-- > 0;) {
        out.push_back(digits[i]);
        if (++count == 3 && i > 0 && digits[i - 1] != '-') {
            out.push_back(',');
            count = 0;
        }
    }
    std::reverse(out.begin(), out.end());
    return out;
}

void write_bytes(const fs::path& path, const void* data, size_t n) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw ConfigError("cannot write " + path.string());
    f.write(static_cast<const char*>(data), std::streamsize(n));
    if (!f) throw ConfigError("failed writing " + path.string());
}

void write_text(const fs::path& path, const std::string& text) {
    write_bytes(path, text.data(), text.size());
}

// Grayscale planes tiled side by side, normalized together over their full
// range so repeated runs produce identical bytes.
template <typename T>
void write_pgm_tiled(const fs::path& path, const std::vector<const T*>& planes,
                     int64_t h, int64_t w) {
    double lo = 1e300, hi = -1e300;
    for (const T* p : planes)
        for (int64_t i = 0; i < h * w; ++i) {
            lo = std::min(lo, double(p[i]));
            hi = std::max(hi, double(p[i]));
        }
    const double span = hi > lo ? hi - lo : 1.0;
    const int64_t W = w * int64_t(planes.size());
    std::ostringstream os;
    os << "P5\n" << W << ' ' << h << "\n255\n";
    std::string bytes = os.str();
    bytes.reserve(bytes.size() + size_t(h * W));
    for (int64_t y = 0; y < h; ++y)
        for (const T* p : planes)
            for (int64_t x = 0; x < w; ++x) {
                const double v = (double(p[y * w + x]) - lo) / span;
                bytes.push_back(char(int(std::lround(v * 255.0))));
            }
    write_bytes(path, bytes.data(), bytes.size());
}

// Binary PPM from three channel planes, normalized together.
template <typename T>
void write_ppm(const fs::path& path, const T* r, const T* g, const T* b,
               int64_t h, int64_t w) {
    double lo = 1e300, hi = -1e300;
    for (const T* p : {r, g, b})
        for (int64_t i = 0; i < h * w; ++i) {
            lo = std::min(lo, double(p[i]));
            hi = std::max(hi, double(p[i]));
        }
    const double span = hi > lo ? hi - lo : 1.0;
    std::ostringstream os;
    os << "P6\n" << w << ' ' << h << "\n255\n";
    std::string bytes = os.str();
    for (int64_t i = 0; i < h * w; ++i)
        for (const T* p : {r, g, b}) {
            const double v = (double(p[i]) - lo) / span;
            bytes.push_back(char(int(std::lround(v * 255.0))));
        }
    write_bytes(path, bytes.data(), bytes.size());
}

// =============================================================================
// Shared model construction
// =============================================================================

// When a size preset is named, the manifest should record the dimensions the
// run actually used, not the custom-model defaults the preset supersedes.
void normalize_model(Config& cfg) {
    auto it = cfg.find("model");
    if (it == cfg.end()) return;
    const std::string size = it->second.at("size");
    if (size.empty()) return;
    const arch::ModelConfig mc = arch::preset_config(
        arch::parse_variant(it->second.at("variant")), size);
    it->second["layers"] = std::to_string(mc.n_layers);
    it->second["d"] = std::to_string(mc.d);
    it->second["heads"] = std::to_string(mc.heads);
}

arch::ModelConfig model_from(const Config& cfg) {
    const std::string size = raw(cfg, "model", "size");
    const arch::Variant v = arch::parse_variant(raw(cfg, "model", "variant"));
    arch::ModelConfig mc;
    if (!size.empty()) {
        mc = arch::preset_config(v, size);
    } else {
        mc.variant = v;
        mc.n_layers = get_i64(cfg, "model", "layers");
        mc.d = get_i64(cfg, "model", "d");
        mc.heads = get_i64(cfg, "model", "heads");
    }
    mc.patch = get_i64(cfg, "model", "patch");
    mc.latent_channels = get_i64(cfg, "model", "latent_channels");
    mc.l_text = get_i64(cfg, "model", "l_text");
    mc.d_enc = get_i64(cfg, "model", "d_enc");
    mc.time_dim = get_i64(cfg, "model", "time_dim");
    mc.use_pooled = get_bool(cfg, "model", "use_pooled");
    mc.seed = get_u64(cfg, "model", "model_seed");
    return mc;
}

scaling::TaskConfig task_from(const Config& cfg) {
    scaling::TaskConfig tc;
    tc.n_classes = get_i64(cfg, "task", "classes");
    tc.latent_channels = get_i64(cfg, "task", "latent_channels");
    tc.grid = get_i64(cfg, "task", "grid");
    tc.sigma = get_f64(cfg, "task", "sigma");
    tc.l_text = get_i64(cfg, "task", "l_text");
    tc.d_enc = get_i64(cfg, "task", "d_enc");
    tc.val_items = get_i64(cfg, "task", "val_items");
    tc.batch = get_i64(cfg, "task", "batch");
    tc.lr = get_f64(cfg, "task", "lr");
    tc.log_every = get_i64(cfg, "task", "log_every");
    tc.tdist.m = get_f64(cfg, "task", "tdist_m");
    tc.tdist.s = get_f64(cfg, "task", "tdist_s");
    tc.seed = get_u64(cfg, "task", "task_seed");
    return tc;
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream is(s);
    while (std::getline(is, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

// =============================================================================
// Subcommand bodies
// =============================================================================

void require_no_input(const Config& cfg, const std::string& sub) {
    if (!raw(cfg, "run", "input").empty())
        throw ConfigError(sub + " does not take --input");
}

void cmd_audit(const Config& cfg, const fs::path& out_dir, std::ostream& out) {
    require_no_input(cfg, "audit");
    const arch::ModelConfig mc = model_from(cfg);
    const std::string size = raw(cfg, "model", "size");
    const arch::ModelPlan plan = arch::plan_parameters(mc);
    const audit::AuditReport report =
        audit::audit_plan(plan, size.empty() ? "custom" : size);

    std::ostringstream table;
    audit::print_audit_table(table, report);
    // Closed-form block-weight total; the table above also carries the
    // with-overhead figure.
    table << "formula total " << group3(report.expected.total()) << "\n";
    out << table.str();
    write_text(out_dir / "audit.txt", table.str());
}

void cmd_sample(const Config& cfg, const fs::path& out_dir,
                std::ostream& out) {
    const arch::ModelConfig mc = model_from(cfg);
    arch::Model<float> model = arch::build_model<float>(mc);
    const std::string input = raw(cfg, "run", "input");
    if (!input.empty()) load_checkpoint(model.store, input);

    // Token ids run through the frozen toy encoder to a feature bundle.
    std::vector<int32_t> ids;
    {
        std::istringstream is(raw(cfg, "sample", "tokens"));
        std::string tok;
        while (is >> tok) {
            try {
                size_t pos = 0;
                ids.push_back(int32_t(std::stol(tok, &pos)));
                if (pos != tok.size()) throw std::invalid_argument(tok);
            } catch (const std::exception&) {
                throw ConfigError("bad token id: '" + tok + "'");
            }
        }
        if (ids.empty()) throw ConfigError("sample.tokens is empty");
    }
    const std::string mode_name = raw(cfg, "encoder", "mode");
    cond::EncoderMode mode;
    if (mode_name == "bidirectional")
        mode = cond::EncoderMode::Bidirectional;
    else if (mode_name == "causal")
        mode = cond::EncoderMode::Causal;
    else
        throw ConfigError("encoder.mode must be bidirectional or causal");
    const int64_t enc_layers = get_i64(cfg, "encoder", "enc_layers");
    const cond::ToyEncoder<float> enc = cond::make_toy_encoder<float>(
        get_i64(cfg, "encoder", "vocab"), mc.d_enc, enc_layers, mode,
        get_u64(cfg, "encoder", "enc_seed"));
    const cond::CondBundle<float> bundle =
        cond::encode<float>(enc, ids, {enc_layers});

    sampler::SamplerConfig sc;
    sc.steps = int(get_i64(cfg, "sample", "steps"));
    sc.w = get_f64(cfg, "sample", "cfg");
    sc.churn = get_f64(cfg, "sample", "churn");
    sc.seed = get_u64(cfg, "run", "seed");
    const int64_t grid = get_i64(cfg, "sample", "grid");

    Rng rng(sc.seed, 0);
    const Tensor<float> lat =
        sampler::generate<float>(model, bundle, grid, grid, sc, rng);

    write_bytes(out_dir / "latents.f32", lat.ptr(),
                size_t(lat.size()) * sizeof(float));
    const int64_t c = lat.shape[1], gh = lat.shape[2], gw = lat.shape[3];
    if (c == 3) {
        write_ppm<float>(out_dir / "preview.ppm", lat.ptr(),
                         lat.ptr() + gh * gw, lat.ptr() + 2 * gh * gw, gh, gw);
    } else {
        std::vector<const float*> planes;
        for (int64_t ch = 0; ch < c; ++ch)
            planes.push_back(lat.ptr() + ch * gh * gw);
        write_pgm_tiled<float>(out_dir / "preview.pgm", planes, gh, gw);
    }
    out << "sampled latents " << shape_str(lat.shape) << " in " << sc.steps
        << " steps (guidance " << sc.w << ")\n";
}

void cmd_train(const Config& cfg, const fs::path& out_dir, std::ostream& out) {
    require_no_input(cfg, "train");
    const arch::ModelConfig mc = model_from(cfg);
    const scaling::TaskConfig tc = task_from(cfg);
    const int64_t steps = get_i64(cfg, "train", "steps");

    Rng rng(get_u64(cfg, "run", "seed"), 1);
    arch::Model<float> trained;
    const scaling::RunRecord rec =
        scaling::train_run<float>(mc, tc, steps, rng, &trained);

    save_checkpoint(trained.store, (out_dir / "checkpoint.bin").string());
    {
        std::ostringstream os;
        os << "step,loss\n" << std::setprecision(17);
        for (const auto& p : rec.train_curve)
            os << p.step << ',' << p.loss << '\n';
        write_text(out_dir / "curve.csv", os.str());
    }
    {
        std::ostringstream os;
        os << "variant,layers,d,params,val_loss\n" << std::setprecision(17);
        os << rec.variant << ',' << rec.n_layers << ',' << rec.d << ','
           << rec.params << ',' << rec.val_loss << '\n';
        write_text(out_dir / "run.csv", os.str());
    }
    out << "trained " << rec.variant << " layers=" << rec.n_layers
        << " d=" << rec.d << " params=" << rec.params << " steps=" << steps
        << "\nvalidation loss " << rec.val_loss << "\n";
}

void cmd_fit_scaling(const Config& cfg, const fs::path& out_dir,
                     std::ostream& out) {
    const std::string input = raw(cfg, "run", "input");
    std::vector<scaling::RunRecord> records;
    if (!input.empty()) {
        records = scaling::read_runs_csv(input);
    } else {
        std::vector<arch::Variant> variants;
        for (const std::string& name :
             split_list(raw(cfg, "grid", "variants")))
            variants.push_back(arch::parse_variant(name));
        std::vector<int64_t> layers;
        for (const std::string& item :
             split_list(raw(cfg, "grid", "layers"))) {
            try {
                size_t pos = 0;
                layers.push_back(std::stoll(item, &pos));
                if (pos != item.size()) throw std::invalid_argument(item);
            } catch (const std::exception&) {
                throw ConfigError("bad grid.layers entry: '" + item + "'");
            }
        }
        records = scaling::run_grid<float>(
            variants, layers, task_from(cfg), get_i64(cfg, "grid", "steps"),
            int(get_i64(cfg, "grid", "workers")));
    }
    const auto fits = scaling::emit_report(records, out_dir.string());
    if (fits.empty())
        throw ConfigError(
            "no variant has two distinct model sizes; nothing to fit");
    out << std::setprecision(6);
    for (const auto& f : fits)
        out << "fit " << f.first << ": a=" << f.second.a
            << " b=" << f.second.b << " (rms " << f.second.rms << ")\n";
}

void cmd_vae(const Config& cfg, const fs::path& out_dir, std::ostream& out) {
    vaetoy::VaeConfig vc;
    vc.compression = get_i64(cfg, "vae", "compression");
    vc.c1 = get_i64(cfg, "vae", "c1");
    vc.c2 = get_i64(cfg, "vae", "c2");
    vc.beta = get_f64(cfg, "vae", "beta");
    vc.batch = get_i64(cfg, "vae", "batch");
    vc.lr = get_f64(cfg, "vae", "lr");
    vc.log_every = get_i64(cfg, "vae", "log_every");
    vc.seed = get_u64(cfg, "vae", "vae_seed");
    const int64_t stage = get_i64(cfg, "vae", "stage");
    const int64_t steps = get_i64(cfg, "vae", "steps");
    if (stage == 1)
        vc.steps_stage1 = steps;
    else if (stage == 2)
        vc.steps_stage2 = steps;
    else
        throw ConfigError("vae.stage must be 1 or 2");

    const Tensor<double> data = vaetoy::make_textures<double>(
        get_i64(cfg, "vae", "textures"), get_i64(cfg, "vae", "tex"),
        get_i64(cfg, "vae", "tex"), get_u64(cfg, "vae", "data_seed"));

    Rng rng(get_u64(cfg, "run", "seed"), 2);
    const std::string input = raw(cfg, "run", "input");
    vaetoy::TrainResult<double> res;
    if (stage == 1) {
        require_no_input(cfg, "vae stage 1");
        res = vaetoy::train_vae<double>(vc, data, 1, rng);
    } else {
        if (input.empty())
            throw ConfigError("vae stage 2 needs --input <stage-1 checkpoint>");
        Rng build_rng(0, 0);
        vaetoy::VaeModel<double> stage1 =
            vaetoy::build_vae<double>(vc, vc.c1, build_rng);
        load_checkpoint(stage1.store, input);
        res = vaetoy::train_vae<double>(vc, data, 2, rng, &stage1);
    }

    save_checkpoint(res.model.store,
                    (out_dir / "vae_checkpoint.bin").string());
    vaetoy::write_metrics_csv(res.metrics,
                              (out_dir / "metrics.csv").string());

    // Deterministic preview: first texture next to its mean reconstruction.
    const int64_t h = data.shape[2], w = data.shape[3];
    Tensor<double> x0(Shape{1, 1, h, w});
    std::copy(data.ptr(), data.ptr() + h * w, x0.ptr());
    const vaetoy::Posterior<double> post =
        vaetoy::encode<double>(res.model, x0, nullptr);
    const Tensor<double> recon =
        vaetoy::decode<double>(res.model, post.mean, nullptr);
    write_pgm_tiled<double>(out_dir / "recon.pgm", {x0.ptr(), recon.ptr()}, h,
                            w);

    const double kl = vaetoy::measure_kl<double>(res.model, data);
    const vaetoy::MetricRow& last = res.metrics.back();
    out << "vae stage " << stage << " latent channels "
        << res.model.latent_channels << ": final mse " << last.mse
        << ", final kl " << last.kl << ", dataset kl " << kl << "\n";
}

// =============================================================================
// Usage
// =============================================================================

const char* kUsage =
    "usage: ditair <subcommand> [flags] [section.key=value ...]\n"
    "\n"
    "subcommands\n"
    "  audit        parameter count tables for a model configuration\n"
    "  train        train one model on the conditional-Gaussian task\n"
    "  sample       guided Heun sampling from a fresh or trained model\n"
    "  fit-scaling  run a size grid (or read runs.csv) and fit power laws\n"
    "  vae          train the toy VAE (stage 1) or widen it (stage 2)\n"
    "\n"
    "flags\n"
    "  --config PATH   load a config file (a manifest.ini replays a run)\n"
    "  --out DIR       output directory (default ditair_out)\n"
    "  --seed N        run seed            --input PATH  input file\n"
    "  --variant NAME  model variant       --size S      preset S/B/L/XL/XXL\n"
    "  --steps N       step budget         --cfg W       guidance strength\n"
    "  --stage N       vae stage (1 or 2)\n"
    "\n"
    "Any resolved key can be overridden as section.key=value. Every run\n"
    "writes its artifacts plus manifest.ini under --out; re-running with\n"
    "--config manifest.ini reproduces the outputs byte for byte.\n"
    "DITAIR_THREADS caps worker threads.\n";

}  // namespace

// =============================================================================
// Entry point
// =============================================================================

int run(const std::vector<std::string>& args, std::ostream& out,
        std::ostream& err) {
    Invocation inv;
    try {
        inv = parse_argv(args);
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n\n" << kUsage;
        return 1;
    }
    if (inv.help) {
        out << kUsage;
        return 0;
    }

    try {
        Resolved r = resolve(inv.subcommand, inv);
        normalize_model(r.cfg);

        const fs::path out_dir(inv.out_dir);
        fs::create_directories(out_dir);

        // Inputs are pinned by content hash before any work happens.
        const std::string input = r.cfg.at("run").at("input");
        std::string input_sha1;
        if (!input.empty()) {
            input_sha1 = git_blob_sha1_file(input);
            if (!r.expected_input_sha1.empty() &&
                r.expected_input_sha1 != input_sha1)
                throw ConfigError("input hash mismatch for " + input +
                                  ": manifest expects " +
                                  r.expected_input_sha1 + ", file is " +
                                  input_sha1);
        }

        if (inv.subcommand == "audit")
            cmd_audit(r.cfg, out_dir, out);
        else if (inv.subcommand == "sample")
            cmd_sample(r.cfg, out_dir, out);
        else if (inv.subcommand == "train")
            cmd_train(r.cfg, out_dir, out);
        else if (inv.subcommand == "fit-scaling")
            cmd_fit_scaling(r.cfg, out_dir, out);
        else
            cmd_vae(r.cfg, out_dir, out);

        Config manifest = r.cfg;
        manifest["invocation"]["subcommand"] = inv.subcommand;
        if (!input_sha1.empty()) manifest["inputs"]["input_sha1"] = input_sha1;
        write_text(out_dir / "manifest.ini", serialize_config(manifest));
    } catch (const NumericError& e) {
        err << "numeric error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

}  // namespace cli
}  // namespace ditair
