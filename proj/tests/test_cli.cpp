// CLI tests drive cli::run in-process: flag parsing, config resolution with
// unknown-key rejection, exit-code mapping, deterministic artifacts, and the
// manifest replay contract.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "ditair/cli.hpp"
#include "ditair/scalinglab.hpp"

#include "doctest.h"

using namespace ditair;
namespace fs = std::filesystem;

namespace {

struct RunResult {
    int code = -1;
    std::string out, err;
};

RunResult run_cli(const std::vector<std::string>& args) {
    std::ostringstream out, err;
    RunResult r;
    r.code = cli::run(args, out, err);
    r.out = out.str();
    r.err = err.str();
    return r;
}

fs::path fresh_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("ditair_cli_" + name);
    fs::remove_all(p);
    return p;
}

std::string slurp(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    REQUIRE(bool(f));
    std::string s((std::istreambuf_iterator<char>(f)),
                  std::istreambuf_iterator<char>());
    return s;
}

std::vector<std::string> dir_entries(const fs::path& dir) {
    std::vector<std::string> names;
    for (const auto& e : fs::directory_iterator(dir))
        names.push_back(e.path().filename().string());
    std::sort(names.begin(), names.end());
    return names;
}

// Tiny-model overrides shared by the training-path tests.
const std::vector<std::string> kTinyModel = {
    "model.layers=1", "model.d=32", "model.heads=1"};
const std::vector<std::string> kTinyTask = {
    "task.batch=4", "task.val_items=16", "task.log_every=10"};

std::vector<std::string> cat(std::vector<std::string> a,
                             const std::vector<std::string>& b) {
    a.insert(a.end(), b.begin(), b.end());
    return a;
}

}  // namespace

TEST_CASE("config text parses sections, comments and spacing") {
    const std::string text =
        "# leading comment\n"
        "[model]\n"
        "variant = dit_air   ; trailing comment\n"
        "  d=64\n"
        "\n"
        "[sample]\n"
        "tokens = 1 2 3 4\n";
    const cli::Config cfg = cli::parse_config_text(text);
    CHECK(cfg.at("model").at("variant") == "dit_air");
    CHECK(cfg.at("model").at("d") == "64");
    CHECK(cfg.at("sample").at("tokens") == "1 2 3 4");

    CHECK_THROWS_AS(cli::parse_config_text("[a]\nx = 1\nx = 2\n"),
                    ConfigError);
    CHECK_THROWS_AS(cli::parse_config_text("x = 1\n"), ConfigError);
    CHECK_THROWS_AS(cli::parse_config_text("[a]\njust words\n"), ConfigError);
    CHECK_THROWS_AS(cli::parse_config_text("[broken\nx = 1\n"), ConfigError);
    CHECK_THROWS_AS(cli::parse_config_text("[a]\n= 1\n"), ConfigError);
}

TEST_CASE("config serialization round-trips and is byte-stable") {
    cli::Config cfg;
    cfg["beta"]["k"] = "v with spaces";
    cfg["alpha"]["z"] = "1";
    cfg["alpha"]["a"] = "2";
    const std::string text = cli::serialize_config(cfg);
    CHECK(cli::parse_config_text(text) == cfg);
    CHECK(cli::serialize_config(cli::parse_config_text(text)) == text);
    // map ordering puts alpha before beta and a before z
    CHECK(text.find("[alpha]") < text.find("[beta]"));
    CHECK(text.find("a = 2") < text.find("z = 1"));
}

TEST_CASE("argv parsing maps flags onto config overrides") {
    auto inv = cli::parse_argv({"sample", "--steps", "12", "--cfg", "3",
                                "--seed", "9", "--out", "somewhere",
                                "sample.grid=4"});
    CHECK(inv.subcommand == "sample");
    CHECK(inv.out_dir == "somewhere");
    REQUIRE(inv.overrides.size() == 4);
    CHECK(inv.overrides[0] ==
          std::pair<std::string, std::string>{"sample.steps", "12"});
    CHECK(inv.overrides[1] ==
          std::pair<std::string, std::string>{"sample.cfg", "3"});
    CHECK(inv.overrides[2] ==
          std::pair<std::string, std::string>{"run.seed", "9"});
    CHECK(inv.overrides[3] ==
          std::pair<std::string, std::string>{"sample.grid", "4"});

    CHECK(cli::parse_argv({"audit"}).out_dir == "ditair_out");
    CHECK_THROWS_AS(cli::parse_argv({}), ConfigError);
    CHECK_THROWS_AS(cli::parse_argv({"frobnicate"}), ConfigError);
    CHECK_THROWS_AS(cli::parse_argv({"audit", "--bogus"}), ConfigError);
    CHECK_THROWS_AS(cli::parse_argv({"audit", "--seed"}), ConfigError);
    CHECK_THROWS_AS(cli::parse_argv({"train", "--cfg", "3"}), ConfigError);
    CHECK_THROWS_AS(cli::parse_argv({"sample", "--stage", "1"}), ConfigError);
    CHECK_THROWS_AS(cli::parse_argv({"audit", "loose-token"}), ConfigError);
    CHECK_THROWS_AS(cli::parse_argv({"audit", "nodot=1"}), ConfigError);
    CHECK_THROWS_AS(cli::default_config("frobnicate"), ConfigError);
}

TEST_CASE("audit prints the closed-form table for a preset") {
    const fs::path dir = fresh_dir("audit");
    auto r = run_cli({"audit", "--variant", "dit_air", "--size", "B", "--out",
                      dir.string()});
    CHECK(r.code == 0);
    CHECK(r.err.empty());
    CHECK(r.out.find("dit_air/B") != std::string::npos);
    CHECK(r.out.find("302579712") != std::string::npos);
    CHECK(r.out.find("formula total 302,579,712") != std::string::npos);
    CHECK(dir_entries(dir) ==
          std::vector<std::string>{"audit.txt", "manifest.ini"});
    CHECK(slurp(dir / "audit.txt") == r.out);

    const cli::Config manifest =
        cli::parse_config_file((dir / "manifest.ini").string());
    CHECK(manifest.at("invocation").at("subcommand") == "audit");
    // preset resolution is recorded, not the custom-model defaults
    CHECK(manifest.at("model").at("layers") == "18");
    CHECK(manifest.at("model").at("d") == "1152");
    fs::remove_all(dir);
}

TEST_CASE("validation failures exit 1 with a diagnostic") {
    const fs::path dir = fresh_dir("fail1");
    auto r = run_cli({"audit", "--out", dir.string(), "model.bogus=1"});
    CHECK(r.code == 1);
    CHECK(r.err.find("model.bogus") != std::string::npos);

    r = run_cli({"audit", "--out", dir.string(), "--variant", "nonsense"});
    CHECK(r.code == 1);
    CHECK(!r.err.empty());

    r = run_cli({"audit", "--out", dir.string(), "--input", "/no/such/file"});
    CHECK(r.code == 1);

    r = run_cli({"audit", "--out", dir.string(), "model.layers=abc"});
    CHECK(r.code == 1);
    CHECK(r.err.find("model.layers") != std::string::npos);

    // a config written for one subcommand cannot drive another
    const fs::path adir = fresh_dir("fail1b");
    auto ok = run_cli({"audit", "--out", adir.string()});
    REQUIRE(ok.code == 0);
    r = run_cli({"train", "--config", (adir / "manifest.ini").string(),
                 "--out", dir.string()});
    CHECK(r.code == 1);
    CHECK(r.err.find("audit") != std::string::npos);
    fs::remove_all(dir);
    fs::remove_all(adir);
}

TEST_CASE("help and missing subcommand") {
    auto r = run_cli({"--help"});
    CHECK(r.code == 0);
    CHECK(r.out.find("usage:") != std::string::npos);
    r = run_cli({});
    CHECK(r.code == 1);
    CHECK(r.err.find("usage:") != std::string::npos);
}

TEST_CASE("sampling is deterministic and writes only into --out") {
    const fs::path a = fresh_dir("samp_a"), b = fresh_dir("samp_b");
    const std::vector<std::string> common = {
        "sample", "--steps", "4", "--cfg", "2", "--seed", "7",
        "sample.grid=4"};
    auto ra = run_cli(cat(common, {"--out", a.string()}));
    auto rb = run_cli(cat(common, {"--out", b.string()}));
    REQUIRE(ra.code == 0);
    REQUIRE(rb.code == 0);
    CHECK(ra.out == rb.out);

    CHECK(dir_entries(a) == std::vector<std::string>{
                                "latents.f32", "manifest.ini", "preview.pgm"});
    CHECK(slurp(a / "latents.f32") == slurp(b / "latents.f32"));
    CHECK(slurp(a / "preview.pgm") == slurp(b / "preview.pgm"));
    CHECK(slurp(a / "manifest.ini") == slurp(b / "manifest.ini"));

    // 4 channels of a 4x4 grid tile to a 16x4 grayscale image
    CHECK(slurp(a / "preview.pgm").rfind("P5\n16 4\n255\n", 0) == 0);
    // f32 payload: 1 * 4 * 4 * 4 floats
    CHECK(fs::file_size(a / "latents.f32") == 64 * 4);

    // a different seed changes the latents
    const fs::path c = fresh_dir("samp_c");
    auto rc = run_cli({"sample", "--steps", "4", "--cfg", "2", "--seed", "8",
                       "sample.grid=4", "--out", c.string()});
    REQUIRE(rc.code == 0);
    CHECK(slurp(a / "latents.f32") != slurp(c / "latents.f32"));
    fs::remove_all(a);
    fs::remove_all(b);
    fs::remove_all(c);
}

TEST_CASE("manifest replay reproduces a run byte for byte") {
    const fs::path a = fresh_dir("replay_a"), b = fresh_dir("replay_b");
    auto ra = run_cli({"sample", "--steps", "5", "--cfg", "1.5", "--seed",
                       "11", "sample.grid=4", "sample.tokens=3 1 4 1 5",
                       "--out", a.string()});
    REQUIRE(ra.code == 0);
    auto rb = run_cli({"sample", "--config", (a / "manifest.ini").string(),
                       "--out", b.string()});
    REQUIRE(rb.code == 0);
    CHECK(slurp(a / "latents.f32") == slurp(b / "latents.f32"));
    CHECK(slurp(a / "preview.pgm") == slurp(b / "preview.pgm"));
    CHECK(slurp(a / "manifest.ini") == slurp(b / "manifest.ini"));
    fs::remove_all(a);
    fs::remove_all(b);
}

TEST_CASE("training writes checkpoint, curve and run row") {
    const fs::path dir = fresh_dir("train");
    auto r = run_cli(cat(cat({"train", "--steps", "30", "--seed", "3", "--out",
                              dir.string()},
                             kTinyModel),
                         kTinyTask));
    REQUIRE(r.code == 0);
    CHECK(r.out.find("trained dit_air") != std::string::npos);
    CHECK(dir_entries(dir) ==
          std::vector<std::string>{"checkpoint.bin", "curve.csv",
                                   "manifest.ini", "run.csv"});

    const auto rows = scaling::read_runs_csv((dir / "run.csv").string());
    REQUIRE(rows.size() == 1);
    CHECK(rows[0].variant == "dit_air");
    CHECK(rows[0].n_layers == 1);
    CHECK(rows[0].params > 0);
    CHECK(rows[0].val_loss > 0.0);

    const std::string curve = slurp(dir / "curve.csv");
    CHECK(curve.rfind("step,loss\n", 0) == 0);
    CHECK(curve.find("\n10,") != std::string::npos);
    CHECK(curve.find("\n30,") != std::string::npos);
    fs::remove_all(dir);
}

TEST_CASE("diverging training exits 2") {
    const fs::path dir = fresh_dir("train_div");
    auto r = run_cli(cat(cat({"train", "--steps", "30", "--out", dir.string(),
                              "task.lr=1e4"},
                             kTinyModel),
                         kTinyTask));
    CHECK(r.code == 2);
    CHECK(r.err.find("diverged") != std::string::npos);
    fs::remove_all(dir);
}

TEST_CASE("sampling from a trained checkpoint verifies its hash") {
    const fs::path tdir = fresh_dir("ckpt_train");
    auto rt = run_cli(cat(cat({"train", "--steps", "20", "--seed", "3",
                               "--out", tdir.string()},
                              kTinyModel),
                          kTinyTask));
    REQUIRE(rt.code == 0);
    const std::string ckpt = (tdir / "checkpoint.bin").string();

    const std::vector<std::string> model_args = {
        "sample", "--steps", "4", "--cfg", "2", "--seed", "7",
        "sample.grid=4"};
    const fs::path fresh = fresh_dir("ckpt_fresh"),
                   loaded = fresh_dir("ckpt_loaded");
    auto rf = run_cli(cat(cat(model_args, kTinyModel),
                          {"--out", fresh.string()}));
    auto rl = run_cli(cat(cat(model_args, kTinyModel),
                          {"--input", ckpt, "--out", loaded.string()}));
    REQUIRE(rf.code == 0);
    REQUIRE(rl.code == 0);
    // trained weights must actually change the trajectory
    CHECK(slurp(fresh / "latents.f32") != slurp(loaded / "latents.f32"));
    const cli::Config manifest =
        cli::parse_config_file((loaded / "manifest.ini").string());
    CHECK(manifest.at("inputs").at("input_sha1").size() == 40);

    // tampering with the input is caught by the recorded hash on replay
    const fs::path tampered = tdir / "tampered.bin";
    {
        std::string bytes = slurp(ckpt);
        bytes[bytes.size() / 2] = char(bytes[bytes.size() / 2] ^ 0x40);
        std::ofstream f(tampered, std::ios::binary);
        f.write(bytes.data(), std::streamsize(bytes.size()));
    }
    const fs::path replay = fresh_dir("ckpt_replay");
    auto rr = run_cli({"sample", "--config",
                       (loaded / "manifest.ini").string(), "--input",
                       tampered.string(), "--out", replay.string()});
    CHECK(rr.code == 1);
    CHECK(rr.err.find("hash mismatch") != std::string::npos);
    fs::remove_all(tdir);
    fs::remove_all(fresh);
    fs::remove_all(loaded);
    fs::remove_all(replay);
}

TEST_CASE("fit-scaling recovers exact synthetic exponents from a csv") {
    const fs::path dir = fresh_dir("fit");
    fs::create_directories(dir);
    const fs::path csv = dir / "synthetic.csv";
    {
        std::ofstream f(csv);
        f << "variant,layers,d,params,val_loss\n" << std::setprecision(17);
        int64_t layers = 2;
        for (double s : {1e6, 1e7, 1e8}) {
            f << "dit_air," << layers << ',' << 32 * layers << ','
              << int64_t(s) << ',' << 2.0 * std::pow(s, -0.3) << '\n';
            layers += 2;
        }
    }
    const fs::path out = fresh_dir("fit_out");
    auto r = run_cli({"fit-scaling", "--input", csv.string(), "--out",
                      out.string()});
    REQUIRE(r.code == 0);
    CHECK(r.out.find("fit dit_air: a=2 b=-0.3") != std::string::npos);
    CHECK(dir_entries(out) ==
          std::vector<std::string>{"fits.csv", "manifest.ini", "runs.csv",
                                   "scaling.svg"});

    // a single model size cannot pin a slope
    const fs::path bad_csv = dir / "single.csv";
    {
        std::ofstream f(bad_csv);
        f << "variant,layers,d,params,val_loss\n";
        f << "dit_air,2,64,1000000,0.5\n";
        f << "dit_air,2,64,1000000,0.6\n";
    }
    auto rb = run_cli({"fit-scaling", "--input", bad_csv.string(), "--out",
                       out.string()});
    CHECK(rb.code == 1);
    fs::remove_all(dir);
    fs::remove_all(out);
}

TEST_CASE("fit-scaling can run its own miniature grid") {
    const fs::path dir = fresh_dir("fit_grid");
    auto r = run_cli({"fit-scaling", "--steps", "3", "--out", dir.string(),
                      "grid.variants=dit_air", "grid.layers=1,2",
                      "task.batch=4", "task.val_items=8", "grid.workers=1"});
    REQUIRE(r.code == 0);
    CHECK(r.out.find("fit dit_air:") != std::string::npos);
    const auto recs = scaling::read_runs_csv((dir / "runs.csv").string());
    REQUIRE(recs.size() == 2);
    CHECK(recs[0].d == 32 * recs[0].n_layers);
    const std::string svg = slurp(dir / "scaling.svg");
    size_t circles = 0, pos = 0;
    while ((pos = svg.find("<circle", pos)) != std::string::npos) {
        ++circles;
        pos += 7;
    }
    CHECK(circles == 2);
    fs::remove_all(dir);
}

TEST_CASE("vae stages chain through checkpoints") {
    const std::vector<std::string> tiny = {
        "vae.textures=24", "vae.tex=8",      "vae.batch=8",
        "vae.c1=2",        "vae.c2=4",       "vae.log_every=10"};
    const fs::path s1 = fresh_dir("vae_s1"), s2 = fresh_dir("vae_s2");
    auto r1 = run_cli(cat({"vae", "--stage", "1", "--steps", "20", "--out",
                           s1.string()},
                          tiny));
    REQUIRE(r1.code == 0);
    CHECK(r1.out.find("vae stage 1 latent channels 2") != std::string::npos);
    CHECK(dir_entries(s1) ==
          std::vector<std::string>{"manifest.ini", "metrics.csv", "recon.pgm",
                                   "vae_checkpoint.bin"});
    CHECK(slurp(s1 / "recon.pgm").rfind("P5\n16 8\n255\n", 0) == 0);
    CHECK(slurp(s1 / "metrics.csv").rfind("step,mse,kl\n", 0) == 0);

    auto r2 = run_cli(cat({"vae", "--stage", "2", "--steps", "20", "--input",
                           (s1 / "vae_checkpoint.bin").string(), "--out",
                           s2.string()},
                          tiny));
    REQUIRE(r2.code == 0);
    CHECK(r2.out.find("vae stage 2 latent channels 4") != std::string::npos);

    auto rno = run_cli(cat({"vae", "--stage", "2", "--steps", "20", "--out",
                            s2.string()},
                           tiny));
    CHECK(rno.code == 1);
    CHECK(rno.err.find("stage-1 checkpoint") != std::string::npos);

    auto rbad = run_cli(cat({"vae", "--stage", "3", "--out", s2.string()},
                            tiny));
    CHECK(rbad.code == 1);
    fs::remove_all(s1);
    fs::remove_all(s2);
}
