#pragma once

#include "parasol/ctl/service.hpp"

#include <sstream>

#include <unistd.h>

namespace parasol::testing {

/// A run small enough to train in a few seconds.
inline ctl::json tiny_config(const io::fs::path& runs, long steps = 300) {
    return ctl::merge_config({{"corpus", {{"targets", 60}, {"style_db", 60}, {"semantics_db", 60}, {"seed", 5}}},
                              {"mine", {{"k", 20}}},
                              {"model",
                               {{"hidden", 32},
                                {"time_hidden", 8},
                                {"projector_hidden", 8},
                                {"key_dim", 8},
                                {"value_dim", 8}}},
                              {"train", {{"steps", steps}, {"batch", 16}}},
                              {"paths", {{"runs", runs.string()}}}});
}

inline io::fs::path scratch_dir(const std::string& name) {
    const auto dir = io::fs::temp_directory_path() / ("parasol_" + std::to_string(::getpid()) + "_" + name);
    io::fs::remove_all(dir);
    io::fs::create_directories(dir);
    return dir;
}

/// Trained once per process and shared between tests.
inline const ctl::LoadedRun& tiny_run() {
    static const ctl::LoadedRun run = [] {
        std::ostringstream log;
        return ctl::ensure_trained(tiny_config(scratch_dir("tiny_run")), log);
    }();
    return run;
}

}  // namespace parasol::testing
