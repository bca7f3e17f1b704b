#pragma once

#include <iosfwd>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "ditair/common.hpp"

namespace ditair {
namespace cli {

// =============================================================================
// Config files
// =============================================================================
//
// Flat key = value text grouped into [section] headers. '#' and ';' start
// comments, surrounding whitespace is ignored, values keep interior spaces.
// std::map keeps sections and keys sorted, so serialization is byte-stable
// and a written manifest re-parses to an identical object.

using Section = std::map<std::string, std::string>;
using Config = std::map<std::string, Section>;

// ConfigError on malformed lines, keys outside a section, or duplicate keys.
Config parse_config_text(const std::string& text);
Config parse_config_file(const std::string& path);
std::string serialize_config(const Config& cfg);

// =============================================================================
// Invocation
// =============================================================================

struct Invocation {
    std::string subcommand;
    std::string config_path;  // --config, optional
    std::string out_dir;      // --out, defaults to "ditair_out"
    bool help = false;
    // section.key value pairs, from dedicated flags and bare overrides alike,
    // in command-line order (later wins).
    std::vector<std::pair<std::string, std::string>> overrides;
};

// Maps argv (without the program name) onto an Invocation. Dedicated flags
// are sugar for overrides: --seed -> run.seed, --input -> run.input,
// --variant/--size -> model.*, --steps -> the subcommand's own step budget,
// --cfg -> sample.cfg, --stage -> vae.stage. ConfigError on unknown
// subcommands, unknown flags, missing values, or a flag the subcommand does
// not accept.
Invocation parse_argv(const std::vector<std::string>& args);

// Default configuration (full key set) for one subcommand.
Config default_config(const std::string& subcommand);

// =============================================================================
// Entry point
// =============================================================================
//
// Runs one subcommand: audit, train, sample, fit-scaling, or vae. Every run
// resolves its configuration (defaults <- config file <- overrides, unknown
// keys rejected), writes all artifacts under the output directory, and ends
// by writing manifest.ini there: the resolved config plus the content hash
// of any input file, sufficient to reproduce the run bit for bit.
//
// Returns 0 on success, 1 on validation errors (bad flags, bad config,
// rejected shapes), 2 on numeric failures (diverged training, non-finite
// sampler state). Diagnostics go to err.
int run(const std::vector<std::string>& args, std::ostream& out,
        std::ostream& err);

}  // namespace cli
}  // namespace ditair
