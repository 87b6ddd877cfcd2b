// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "json.hpp"

namespace mf::cli {

inline constexpr const char* kToolVersion = "mfvla 0.1.0";

enum ExitCode : int {
    kOk = 0,
    kFailure = 1,   // runtime error: I/O, parse, divergence, replay mismatch
    kUsage = 2,     // bad flags or configuration
    kPartial = 3,   // sweep finished with failed cells
};

/// Entry point shared by the executable and the tests. args excludes the
/// program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Run directory manifest. `replay` holds canonical arguments (without
/// --out) that regenerate every checksummed artifact.
struct Manifest {
    std::string command;
    std::vector<std::string> replay;
    nlohmann::json config;
    std::uint64_t seed = 0;
    nlohmann::json artifacts = nlohmann::json::object();  // name -> {path, sha256}
    nlohmann::json inputs = nlohmann::json::object();     // name -> {path, sha256}
    std::string tool_version = kToolVersion;
    std::string timestamp;

    nlohmann::json to_json() const;
    static Manifest from_json(const nlohmann::json& j);
    static Manifest load(const std::filesystem::path& path);
};

}  // namespace mf::cli
