// SPDX-License-Identifier: Apache-2.0
//
// Command implementations behind the dtme binary. Kept separate from main()
// so tests can drive them in-process. Exit codes: 0 success, 2 usage or
// validation failure, 3 numeric failure.
#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace dtme::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 2;
inline constexpr int kExitNumeric = 3;

struct GenDataArgs {
    std::string spec_path;
    std::string out_dir;
    bool force = false;
};

struct TrainArgs {
    std::optional<std::string> mode;
    std::optional<std::string> config_path;
    std::string dataset_path;
    std::string out_dir;
    bool force = false;
    std::optional<uint64_t> seed;
    std::optional<int> steps;
    std::optional<int> batch;
    std::optional<double> r;
    std::optional<double> beta;
    std::optional<int> tokens_per_task;
    std::optional<double> timing;
    std::optional<std::string> strategy;
    std::optional<std::string> actions;
    std::optional<int> task;
    std::optional<int> monitor_every;
    std::optional<int> conflict_samples;
};

struct AnalyzeArgs {
    std::string checkpoint_path;
    std::string dataset_path;
    double r = 100.0;
    std::string sweep;  // optional comma list of extra r values
    std::string out_path;
    bool force = false;
};

struct ReportArgs {
    std::vector<std::string> run_dirs;
    std::string out_dir;
    bool force = false;
};

int cmd_gen_data(const GenDataArgs& args, std::ostream& out, std::ostream& err);
int cmd_train(const TrainArgs& args, std::ostream& out, std::ostream& err);
int cmd_analyze(const AnalyzeArgs& args, std::ostream& out, std::ostream& err);
int cmd_report(const ReportArgs& args, std::ostream& out, std::ostream& err);

// Full argv front end used by main().
int run_cli(int argc, const char* const* argv);

}  // namespace dtme::cli
