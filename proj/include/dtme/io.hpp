// SPDX-License-Identifier: Apache-2.0
//
// Artifact plumbing: flat key=value configs, binary dataset/checkpoint
// formats, CSV/JSONL run outputs, structured text reports, run-directory
// locking, and a minimal JSON schema check for the report document.
// Formats are documented in docs/formats.md; every artifact embeds the
// config hash it was produced under.
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dtme/expansion.hpp"
#include "dtme/model.hpp"
#include "dtme/multitask.hpp"
#include "dtme/trainer.hpp"

namespace dtme {

// ---- number formatting ----

// Shortest round-trip decimal form; used by every text artifact so repeated
// runs are byte-identical.
std::string format_double(double v);

// Whole-file text write; throws IoError on any failure.
void write_text_file_checked(const std::filesystem::path& path, const std::string& text);

// ---- flat key=value config ----

struct KvConfig {
    std::string origin;  // file name for diagnostics
    int version = 0;
    std::map<std::string, std::string> values;
    std::map<std::string, int> lines;  // key -> 1-based line number

    bool has(const std::string& key) const { return values.count(key) != 0; }
    std::string require(const std::string& key) const;
    std::string get(const std::string& key, const std::string& fallback) const;
    int get_int(const std::string& key, int fallback) const;
    long get_long(const std::string& key, long fallback) const;
    uint64_t get_u64(const std::string& key, uint64_t fallback) const;
    double get_double(const std::string& key, double fallback) const;
    bool get_bool(const std::string& key, bool fallback) const;

    // Error text pinned to the key's source line.
    [[noreturn]] void fail(const std::string& key, const std::string& message) const;
};

// Lines are `key=value`; blank lines and `#` comments are skipped; a
// `version` key is mandatory. Unknown keys are the caller's concern.
KvConfig parse_kv_text(const std::string& text, const std::string& origin);
KvConfig parse_kv_file(const std::filesystem::path& path);

// Typed views over a parsed config.
SyntheticSpec spec_from_config(const KvConfig& cfg);
TrainConfig train_config_from_config(const KvConfig& cfg);

// Canonical serialized form of the effective run configuration; its FNV-1a
// hash ties all artifacts of a run together.
std::string canonical_config_text(const TrainConfig& cfg, uint64_t dataset_hash);
uint64_t config_hash(const TrainConfig& cfg, uint64_t dataset_hash);

// ---- binary artifacts ----

uint64_t hash_file(const std::filesystem::path& path);

void save_dataset(const Dataset& data, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

struct Checkpoint {
    uint64_t config_hash = 0;
    uint64_t seed = 0;
    ModelConfig model_config;
    std::optional<ExpansionPlan> plan;
    std::vector<std::pair<std::string, std::vector<double>>> params;
};

void save_checkpoint(const TransformerModel& model, uint64_t config_hash, uint64_t seed,
                     const std::optional<ExpansionPlan>& plan,
                     const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Rebuilds the model a checkpoint describes: construct, install the plan if
// present, then overwrite every parameter by name.
TransformerModel model_from_checkpoint(const Checkpoint& ckpt);

// ---- run outputs ----

void write_losses_csv(const std::filesystem::path& path, const RunRecord& rec,
                      uint64_t config_hash);
void write_metrics_csv(const std::filesystem::path& path, const MetricTable& table,
                       uint64_t config_hash);
MetricTable read_metrics_csv(const std::filesystem::path& path);

void write_conflicts_jsonl(const std::filesystem::path& path, const RunRecord& rec,
                           uint64_t config_hash);
std::vector<ConflictSnapshot> read_conflicts_jsonl(const std::filesystem::path& path);

std::string plan_to_text(const ExpansionPlan& plan, uint64_t config_hash);
ExpansionPlan plan_from_text(const std::string& text, uint64_t* config_hash_out = nullptr);
void write_plan_txt(const std::filesystem::path& path, const ExpansionPlan& plan,
                    uint64_t config_hash);
ExpansionPlan read_plan_txt(const std::filesystem::path& path,
                            uint64_t* config_hash_out = nullptr);

// Structured text form of a conflict measurement: one layer record with the
// split point and eigenvalue mass fractions, then one record per task pair.
std::string conflict_report_text(const ConflictMeasurement& meas, double r,
                                 uint64_t config_hash);

// ---- run summary (train mode) ----

// Everything the report command needs from one finished run directory.
struct RunSummary {
    std::string dir;
    std::string mode;
    uint64_t seed = 0;
    std::string config_hash_hex;
    MetricTable metrics;
    std::optional<double> delta_m;  // present when every row carries a baseline
    double overhead_percent = 0.0;
    long params_before = 0;
    long params_after = 0;
    double final_total_loss = 0.0;
    int steps = 0;
    double timing = 0.0;
    double beta = 0.0;
    double conflict_reduction_range = 0.0;
    double conflict_reduction_null = 0.0;
    std::vector<ConflictSnapshot> snapshots;
    std::optional<ExpansionPlan> plan;
};

// ---- report schema ----

// The schema is shipped at schemas/report.schema.json and compiled in here;
// a unit test pins the two copies together.
const std::string& report_schema_text();

// Minimal structural validator: type / required / properties / items /
// additionalProperties(false). Throws ContractError naming the failing path.
void validate_against_schema(const nlohmann::json& doc, const nlohmann::json& schema);

// ---- run directory ----

// Creates the directory (parents included). A non-empty existing directory
// is refused unless force is set.
void prepare_run_dir(const std::filesystem::path& dir, bool force);

// Exclusive advisory lock via O_CREAT|O_EXCL on <dir>/.lock; released (and
// unlinked) on destruction. A held lock means another invocation owns the
// directory.
class DirLock {
public:
    explicit DirLock(const std::filesystem::path& dir);
    ~DirLock();
    DirLock(const DirLock&) = delete;
    DirLock& operator=(const DirLock&) = delete;

private:
    std::filesystem::path lock_path_;
    int fd_ = -1;
};

}  // namespace dtme
