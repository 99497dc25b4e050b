// SPDX-License-Identifier: Apache-2.0
#include "dtme/io.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <array>
#include <cerrno>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "dtme/common.hpp"

namespace dtme {

namespace fs = std::filesystem;

// ---- number formatting ----

std::string format_double(double v) {
    std::array<char, 64> buf;
    const auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v);
    return std::string(buf.data(), res.ptr);
}

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == sep) {
            out.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    out.push_back(cur);
    return out;
}

std::string read_text_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

void write_text_file_checked(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << text;
    if (!out) throw IoError("short write to " + path.string());
}

// ---- flat key=value config ----

std::string KvConfig::require(const std::string& key) const {
    auto it = values.find(key);
    if (it == values.end()) {
        throw ContractError(origin + ": missing required key '" + key + "'");
    }
    return it->second;
}

std::string KvConfig::get(const std::string& key, const std::string& fallback) const {
    auto it = values.find(key);
    return it == values.end() ? fallback : it->second;
}

void KvConfig::fail(const std::string& key, const std::string& message) const {
    auto it = lines.find(key);
    const std::string loc =
        it == lines.end() ? origin : origin + ":" + std::to_string(it->second);
    throw ContractError(loc + ": key '" + key + "': " + message);
}

namespace {

template <typename T, typename Parse>
T typed_get(const KvConfig& cfg, const std::string& key, T fallback, Parse parse,
            const char* what) {
    if (!cfg.has(key)) return fallback;
    const std::string raw = cfg.get(key, "");
    try {
        size_t used = 0;
        T v = parse(raw, &used);
        if (used != raw.size()) throw std::invalid_argument("trailing characters");
        return v;
    } catch (const std::exception&) {
        cfg.fail(key, std::string("expected ") + what + ", got '" + raw + "'");
    }
}

}  // namespace

int KvConfig::get_int(const std::string& key, int fallback) const {
    return typed_get<int>(*this, key, fallback,
                          [](const std::string& s, size_t* u) { return std::stoi(s, u); },
                          "an integer");
}

long KvConfig::get_long(const std::string& key, long fallback) const {
    return typed_get<long>(*this, key, fallback,
                           [](const std::string& s, size_t* u) { return std::stol(s, u); },
                           "an integer");
}

uint64_t KvConfig::get_u64(const std::string& key, uint64_t fallback) const {
    return typed_get<uint64_t>(
        *this, key, fallback,
        [](const std::string& s, size_t* u) { return static_cast<uint64_t>(std::stoull(s, u)); },
        "an unsigned integer");
}

double KvConfig::get_double(const std::string& key, double fallback) const {
    return typed_get<double>(*this, key, fallback,
                             [](const std::string& s, size_t* u) { return std::stod(s, u); },
                             "a number");
}

bool KvConfig::get_bool(const std::string& key, bool fallback) const {
    if (!has(key)) return fallback;
    const std::string v = get(key, "");
    if (v == "1" || v == "true") return true;
    if (v == "0" || v == "false") return false;
    fail(key, "expected a boolean (0/1/true/false), got '" + v + "'");
}

KvConfig parse_kv_text(const std::string& text, const std::string& origin) {
    KvConfig cfg;
    cfg.origin = origin;
    int lineno = 0;
    for (const std::string& raw : split(text, '\n')) {
        ++lineno;
        const std::string line = trim(raw);
        if (line.empty() || line[0] == '#') continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos) {
            throw ContractError(origin + ":" + std::to_string(lineno) +
                                ": expected key=value, got '" + line + "'");
        }
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty()) {
            throw ContractError(origin + ":" + std::to_string(lineno) + ": empty key");
        }
        if (cfg.values.count(key)) {
            throw ContractError(origin + ":" + std::to_string(lineno) + ": duplicate key '" +
                                key + "' (first at line " + std::to_string(cfg.lines[key]) + ")");
        }
        cfg.values[key] = value;
        cfg.lines[key] = lineno;
    }
    if (!cfg.has("version")) {
        throw ContractError(origin + ": missing required key 'version'");
    }
    cfg.version = cfg.get_int("version", 0);
    if (cfg.version != 1) cfg.fail("version", "unsupported version (expected 1)");
    return cfg;
}

KvConfig parse_kv_file(const fs::path& path) {
    return parse_kv_text(read_text_file(path), path.string());
}

namespace {

void check_known_keys(const KvConfig& cfg, const std::vector<std::string>& allowed) {
    for (const auto& [key, value] : cfg.values) {
        bool ok = false;
        for (const auto& a : allowed) {
            if (key == a) {
                ok = true;
                break;
            }
        }
        if (!ok) cfg.fail(key, "unknown key");
    }
}

}  // namespace

SyntheticSpec spec_from_config(const KvConfig& cfg) {
    check_known_keys(cfg, {"version", "seed", "samples", "grid_rows", "grid_cols", "channels",
                           "latent_dim", "kappa", "noise", "tasks"});
    SyntheticSpec spec;
    spec.seed = cfg.get_u64("seed", spec.seed);
    spec.samples = cfg.get_int("samples", spec.samples);
    spec.grid_rows = cfg.get_int("grid_rows", spec.grid_rows);
    spec.grid_cols = cfg.get_int("grid_cols", spec.grid_cols);
    spec.channels = cfg.get_int("channels", spec.channels);
    spec.latent_dim = cfg.get_int("latent_dim", spec.latent_dim);
    spec.kappa = cfg.get_double("kappa", spec.kappa);
    spec.noise = cfg.get_double("noise", spec.noise);
    for (const std::string& item : split(cfg.require("tasks"), ',')) {
        const std::string t = trim(item);
        const size_t colon = t.find(':');
        if (colon == std::string::npos) {
            cfg.fail("tasks", "expected kind:dim entries, got '" + t + "'");
        }
        const std::string kind = t.substr(0, colon);
        TaskSpec ts;
        if (kind == "class") {
            ts.kind = HeadSpec::Kind::ClassLogits;
        } else if (kind == "reg") {
            ts.kind = HeadSpec::Kind::Regression;
        } else {
            cfg.fail("tasks", "unknown task kind '" + kind + "' (expected class|reg)");
        }
        try {
            ts.dim = std::stoi(t.substr(colon + 1));
        } catch (const std::exception&) {
            cfg.fail("tasks", "bad dimension in '" + t + "'");
        }
        spec.tasks.push_back(ts);
    }
    try {
        spec.validate();
    } catch (const ContractError& e) {
        throw ContractError(cfg.origin + ": " + e.what());
    }
    return spec;
}

TrainConfig train_config_from_config(const KvConfig& cfg) {
    check_known_keys(cfg, {"version",       "mode",          "seed",
                           "steps",         "batch",         "optimizer",
                           "lr",            "beta1",         "beta2",
                           "eps",           "weight_decay",  "poly_power",
                           "single_task",   "eval_fraction", "monitor_every",
                           "monitor_samples", "task_weights", "depth",
                           "hidden",        "heads",         "r",
                           "beta",          "tokens_per_task", "timing",
                           "strategy",      "actions",       "conflict_samples",
                           "modulator_kind"});
    TrainConfig tc;
    if (cfg.has("mode")) {
        try {
            tc.mode = train_mode_from_string(cfg.get("mode", ""));
        } catch (const ContractError& e) {
            cfg.fail("mode", e.what());
        }
    }
    tc.seed = cfg.get_u64("seed", tc.seed);
    tc.steps = cfg.get_int("steps", tc.steps);
    tc.batch = cfg.get_int("batch", tc.batch);
    if (cfg.has("optimizer")) {
        const std::string o = cfg.get("optimizer", "");
        if (o == "adam") {
            tc.optim.kind = OptimConfig::Kind::Adam;
        } else if (o == "sgd") {
            tc.optim.kind = OptimConfig::Kind::Sgd;
        } else {
            cfg.fail("optimizer", "expected adam|sgd, got '" + o + "'");
        }
    }
    tc.optim.lr = cfg.get_double("lr", tc.optim.lr);
    tc.optim.beta1 = cfg.get_double("beta1", tc.optim.beta1);
    tc.optim.beta2 = cfg.get_double("beta2", tc.optim.beta2);
    tc.optim.eps = cfg.get_double("eps", tc.optim.eps);
    tc.optim.weight_decay = cfg.get_double("weight_decay", tc.optim.weight_decay);
    tc.optim.poly_power = cfg.get_double("poly_power", tc.optim.poly_power);
    tc.single_task = cfg.get_int("single_task", tc.single_task);
    tc.eval_fraction = cfg.get_double("eval_fraction", tc.eval_fraction);
    tc.monitor_every = cfg.get_int("monitor_every", tc.monitor_every);
    tc.monitor_samples = cfg.get_int("monitor_samples", tc.monitor_samples);
    if (cfg.has("task_weights") && !trim(cfg.get("task_weights", "")).empty()) {
        for (const std::string& item : split(cfg.get("task_weights", ""), ',')) {
            try {
                tc.task_weights.push_back(std::stod(trim(item)));
            } catch (const std::exception&) {
                cfg.fail("task_weights", "bad weight '" + trim(item) + "'");
            }
        }
    }
    tc.depth = cfg.get_int("depth", tc.depth);
    tc.hidden = cfg.get_int("hidden", tc.hidden);
    tc.heads = cfg.get_int("heads", tc.heads);
    tc.r = cfg.get_double("r", tc.r);
    tc.beta = cfg.get_double("beta", tc.beta);
    tc.tokens_per_task = cfg.get_int("tokens_per_task", tc.tokens_per_task);
    tc.timing = cfg.get_double("timing", tc.timing);
    if (cfg.has("strategy")) {
        try {
            tc.strategy = plan_strategy_from_string(cfg.get("strategy", ""));
        } catch (const ContractError& e) {
            cfg.fail("strategy", e.what());
        }
    }
    if (cfg.has("actions")) {
        try {
            tc.actions = plan_actions_from_string(cfg.get("actions", ""));
        } catch (const ContractError& e) {
            cfg.fail("actions", e.what());
        }
    }
    tc.conflict_samples = cfg.get_int("conflict_samples", tc.conflict_samples);
    tc.modulator_kind = cfg.get("modulator_kind", tc.modulator_kind);
    return tc;
}

std::string canonical_config_text(const TrainConfig& cfg, uint64_t dataset_hash) {
    std::ostringstream out;
    out << "version=1\n";
    out << "mode=" << to_string(cfg.mode) << "\n";
    out << "seed=" << cfg.seed << "\n";
    out << "steps=" << cfg.steps << "\n";
    out << "batch=" << cfg.batch << "\n";
    out << "optimizer=" << (cfg.optim.kind == OptimConfig::Kind::Adam ? "adam" : "sgd") << "\n";
    out << "lr=" << format_double(cfg.optim.lr) << "\n";
    out << "beta1=" << format_double(cfg.optim.beta1) << "\n";
    out << "beta2=" << format_double(cfg.optim.beta2) << "\n";
    out << "eps=" << format_double(cfg.optim.eps) << "\n";
    out << "weight_decay=" << format_double(cfg.optim.weight_decay) << "\n";
    out << "poly_power=" << format_double(cfg.optim.poly_power) << "\n";
    out << "single_task=" << cfg.single_task << "\n";
    out << "eval_fraction=" << format_double(cfg.eval_fraction) << "\n";
    out << "monitor_every=" << cfg.monitor_every << "\n";
    out << "monitor_samples=" << cfg.monitor_samples << "\n";
    out << "task_weights=";
    for (size_t i = 0; i < cfg.task_weights.size(); ++i) {
        if (i) out << ",";
        out << format_double(cfg.task_weights[i]);
    }
    out << "\n";
    out << "depth=" << cfg.depth << "\n";
    out << "hidden=" << cfg.hidden << "\n";
    out << "heads=" << cfg.heads << "\n";
    out << "r=" << format_double(cfg.r) << "\n";
    out << "beta=" << format_double(cfg.beta) << "\n";
    out << "tokens_per_task=" << cfg.tokens_per_task << "\n";
    out << "timing=" << format_double(cfg.timing) << "\n";
    out << "strategy=" << to_string(cfg.strategy) << "\n";
    out << "actions=" << to_string(cfg.actions) << "\n";
    out << "conflict_samples=" << cfg.conflict_samples << "\n";
    out << "modulator_kind=" << cfg.modulator_kind << "\n";
    out << "dataset_hash=" << hash_hex(dataset_hash) << "\n";
    return out.str();
}

uint64_t config_hash(const TrainConfig& cfg, uint64_t dataset_hash) {
    return fnv1a64(canonical_config_text(cfg, dataset_hash));
}

// ---- binary primitives ----

namespace {

void put_u32(std::string& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f64(std::string& out, double v) {
    uint64_t bits;
    std::memcpy(&bits, &v, sizeof(bits));
    put_u64(out, bits);
}

void put_str(std::string& out, const std::string& s) {
    put_u32(out, static_cast<uint32_t>(s.size()));
    out.append(s);
}

class Reader {
public:
    Reader(const std::string& bytes, std::string origin)
        : bytes_(bytes), origin_(std::move(origin)) {}

    uint32_t u32() {
        need(4);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) {
            v |= static_cast<uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
        }
        pos_ += 4;
        return v;
    }

    uint64_t u64() {
        need(8);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) {
            v |= static_cast<uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
        }
        pos_ += 8;
        return v;
    }

    double f64() {
        const uint64_t bits = u64();
        double v;
        std::memcpy(&v, &bits, sizeof(v));
        return v;
    }

    std::string str() {
        const uint32_t n = u32();
        need(n);
        std::string s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    void expect_magic(const char* magic) {
        const size_t n = std::strlen(magic);
        need(n);
        if (bytes_.compare(pos_, n, magic) != 0) {
            throw IoError(origin_ + ": bad magic (not a " + std::string(magic) + " file)");
        }
        pos_ += n;
    }

    bool at_end() const { return pos_ == bytes_.size(); }

    void expect_end() const {
        if (!at_end()) throw IoError(origin_ + ": trailing bytes");
    }

private:
    void need(size_t n) const {
        if (pos_ + n > bytes_.size()) throw IoError(origin_ + ": truncated file");
    }

    const std::string& bytes_;
    std::string origin_;
    size_t pos_ = 0;
};

constexpr char kDatasetMagic[] = "DTMEDATA";
constexpr char kCheckpointMagic[] = "DTMECKPT";
constexpr uint32_t kFormatVersion = 1;

void put_plan(std::string& out, const ExpansionPlan& plan) {
    put_u32(out, static_cast<uint32_t>(plan.depth));
    put_f64(out, plan.beta);
    put_u32(out, static_cast<uint32_t>(plan.tokens_per_task));
    put_u32(out, static_cast<uint32_t>(plan.strategy));
    put_u64(out, plan.seed);
    put_u32(out, static_cast<uint32_t>(plan.created_step));
    for (const LayerAction a : plan.actions) put_u32(out, static_cast<uint32_t>(a));
    for (const double v : plan.range_scores) put_f64(out, v);
    for (const double v : plan.null_scores) put_f64(out, v);
}

ExpansionPlan read_plan(Reader& r) {
    ExpansionPlan plan;
    plan.depth = static_cast<int>(r.u32());
    plan.beta = r.f64();
    plan.tokens_per_task = static_cast<int>(r.u32());
    plan.strategy = static_cast<PlanStrategy>(r.u32());
    plan.seed = r.u64();
    plan.created_step = static_cast<int>(r.u32());
    plan.actions.resize(static_cast<size_t>(plan.depth));
    for (auto& a : plan.actions) a = static_cast<LayerAction>(r.u32());
    plan.range_scores.resize(static_cast<size_t>(plan.depth));
    for (auto& v : plan.range_scores) v = r.f64();
    plan.null_scores.resize(static_cast<size_t>(plan.depth));
    for (auto& v : plan.null_scores) v = r.f64();
    plan.validate();
    return plan;
}

}  // namespace

uint64_t hash_file(const fs::path& path) { return fnv1a64(read_text_file(path)); }

// ---- dataset ----

void save_dataset(const Dataset& data, const fs::path& path) {
    const SyntheticSpec& spec = data.spec;
    std::string out;
    out.append(kDatasetMagic);
    put_u32(out, kFormatVersion);
    put_u64(out, spec.content_hash());
    put_u64(out, spec.seed);
    put_u32(out, static_cast<uint32_t>(spec.samples));
    put_u32(out, static_cast<uint32_t>(spec.grid_rows));
    put_u32(out, static_cast<uint32_t>(spec.grid_cols));
    put_u32(out, static_cast<uint32_t>(spec.channels));
    put_u32(out, static_cast<uint32_t>(spec.latent_dim));
    put_f64(out, spec.kappa);
    put_f64(out, spec.noise);
    put_u32(out, static_cast<uint32_t>(spec.num_tasks()));
    for (const TaskSpec& t : spec.tasks) {
        put_u32(out, t.kind == HeadSpec::Kind::ClassLogits ? 0u : 1u);
        put_u32(out, static_cast<uint32_t>(t.dim));
    }
    if (data.size() != spec.samples) throw ContractError("save_dataset: sample count mismatch");
    for (const Tensor& x : data.inputs) {
        if (x.numel() != spec.tokens() * spec.channels) {
            throw ContractError("save_dataset: input shape mismatch");
        }
        for (double v : x.data()) put_f64(out, v);
    }
    if (static_cast<int>(data.labels.size()) != spec.num_tasks()) {
        throw ContractError("save_dataset: label table mismatch");
    }
    for (int i = 0; i < spec.num_tasks(); ++i) {
        const TaskLabels& lab = data.labels[static_cast<size_t>(i)];
        if (spec.tasks[static_cast<size_t>(i)].kind == HeadSpec::Kind::ClassLogits) {
            if (static_cast<int>(lab.class_labels.size()) != spec.samples) {
                throw ContractError("save_dataset: class label count mismatch");
            }
            for (int v : lab.class_labels) put_u32(out, static_cast<uint32_t>(v));
        } else {
            if (static_cast<int>(lab.targets.size()) != spec.samples) {
                throw ContractError("save_dataset: target count mismatch");
            }
            for (const Tensor& t : lab.targets) {
                if (t.numel() != spec.tasks[static_cast<size_t>(i)].dim) {
                    throw ContractError("save_dataset: target width mismatch");
                }
                for (double v : t.data()) put_f64(out, v);
            }
        }
    }
    write_text_file_checked(path, out);
}

Dataset load_dataset(const fs::path& path) {
    const std::string bytes = read_text_file(path);
    Reader r(bytes, path.string());
    r.expect_magic(kDatasetMagic);
    if (r.u32() != kFormatVersion) throw IoError(path.string() + ": unsupported version");
    const uint64_t stored_hash = r.u64();

    SyntheticSpec spec;
    spec.seed = r.u64();
    spec.samples = static_cast<int>(r.u32());
    spec.grid_rows = static_cast<int>(r.u32());
    spec.grid_cols = static_cast<int>(r.u32());
    spec.channels = static_cast<int>(r.u32());
    spec.latent_dim = static_cast<int>(r.u32());
    spec.kappa = r.f64();
    spec.noise = r.f64();
    const uint32_t num_tasks = r.u32();
    for (uint32_t i = 0; i < num_tasks; ++i) {
        TaskSpec t;
        t.kind = r.u32() == 0 ? HeadSpec::Kind::ClassLogits : HeadSpec::Kind::Regression;
        t.dim = static_cast<int>(r.u32());
        spec.tasks.push_back(t);
    }
    spec.validate();
    if (spec.content_hash() != stored_hash) {
        throw IoError(path.string() + ": content hash mismatch (corrupt or incompatible)");
    }

    Dataset data;
    data.spec = spec;
    const int n = spec.tokens();
    for (int s = 0; s < spec.samples; ++s) {
        std::vector<double> vals(static_cast<size_t>(n * spec.channels));
        for (auto& v : vals) v = r.f64();
        data.inputs.push_back(Tensor::from({n, spec.channels}, std::move(vals)));
    }
    for (const TaskSpec& t : spec.tasks) {
        TaskLabels lab;
        if (t.kind == HeadSpec::Kind::ClassLogits) {
            for (int s = 0; s < spec.samples; ++s) {
                lab.class_labels.push_back(static_cast<int>(r.u32()));
            }
        } else {
            for (int s = 0; s < spec.samples; ++s) {
                std::vector<double> vals(static_cast<size_t>(t.dim));
                for (auto& v : vals) v = r.f64();
                lab.targets.push_back(Tensor::from({1, t.dim}, std::move(vals)));
            }
        }
        data.labels.push_back(std::move(lab));
    }
    r.expect_end();
    return data;
}

// ---- checkpoint ----

void save_checkpoint(const TransformerModel& model, uint64_t config_hash, uint64_t seed,
                     const std::optional<ExpansionPlan>& plan, const fs::path& path) {
    const ModelConfig& cfg = model.config();
    std::string out;
    out.append(kCheckpointMagic);
    put_u32(out, kFormatVersion);
    put_u64(out, config_hash);
    put_u64(out, seed);
    put_u32(out, static_cast<uint32_t>(cfg.depth));
    put_u32(out, static_cast<uint32_t>(cfg.hidden));
    put_u32(out, static_cast<uint32_t>(cfg.heads));
    put_u32(out, static_cast<uint32_t>(cfg.tokens));
    put_u32(out, static_cast<uint32_t>(cfg.input_channels));
    put_u32(out, cfg.joint_expansion_softmax ? 1u : 0u);
    put_u32(out, static_cast<uint32_t>(cfg.head_specs.size()));
    for (const HeadSpec& h : cfg.head_specs) {
        put_u32(out, h.kind == HeadSpec::Kind::ClassLogits ? 0u : 1u);
        put_u32(out, static_cast<uint32_t>(h.dim));
    }
    put_u32(out, plan.has_value() ? 1u : 0u);
    if (plan) put_plan(out, *plan);
    const auto& params = model.parameters();
    put_u32(out, static_cast<uint32_t>(params.size()));
    for (const auto& p : params) {
        put_str(out, p.name);
        put_u32(out, static_cast<uint32_t>(p.value.ndim()));
        for (int d = 0; d < p.value.ndim(); ++d) {
            put_u32(out, static_cast<uint32_t>(p.value.dim(d)));
        }
        for (double v : p.value.data()) put_f64(out, v);
    }
    write_text_file_checked(path, out);
}

Checkpoint load_checkpoint(const fs::path& path) {
    const std::string bytes = read_text_file(path);
    Reader r(bytes, path.string());
    r.expect_magic(kCheckpointMagic);
    if (r.u32() != kFormatVersion) throw IoError(path.string() + ": unsupported version");

    Checkpoint ckpt;
    ckpt.config_hash = r.u64();
    ckpt.seed = r.u64();
    ckpt.model_config.depth = static_cast<int>(r.u32());
    ckpt.model_config.hidden = static_cast<int>(r.u32());
    ckpt.model_config.heads = static_cast<int>(r.u32());
    ckpt.model_config.tokens = static_cast<int>(r.u32());
    ckpt.model_config.input_channels = static_cast<int>(r.u32());
    ckpt.model_config.joint_expansion_softmax = r.u32() != 0;
    const uint32_t heads = r.u32();
    for (uint32_t i = 0; i < heads; ++i) {
        HeadSpec h;
        h.kind = r.u32() == 0 ? HeadSpec::Kind::ClassLogits : HeadSpec::Kind::Regression;
        h.dim = static_cast<int>(r.u32());
        ckpt.model_config.head_specs.push_back(h);
    }
    if (r.u32() != 0) ckpt.plan = read_plan(r);
    const uint32_t count = r.u32();
    for (uint32_t i = 0; i < count; ++i) {
        std::string name = r.str();
        const uint32_t rank = r.u32();
        long numel = 1;
        for (uint32_t d = 0; d < rank; ++d) numel *= static_cast<long>(r.u32());
        std::vector<double> vals(static_cast<size_t>(numel));
        for (auto& v : vals) v = r.f64();
        ckpt.params.emplace_back(std::move(name), std::move(vals));
    }
    r.expect_end();
    return ckpt;
}

TransformerModel model_from_checkpoint(const Checkpoint& ckpt) {
    TransformerModel model(ckpt.model_config, ckpt.seed);
    if (ckpt.plan) apply_plan(model, *ckpt.plan);
    if (model.parameters().size() != ckpt.params.size()) {
        throw IoError("checkpoint parameter count does not match the rebuilt model");
    }
    for (const auto& [name, vals] : ckpt.params) {
        Tensor t = model.find_parameter(name);
        if (static_cast<size_t>(t.numel()) != vals.size()) {
            throw IoError("checkpoint parameter '" + name + "' has wrong size");
        }
        auto dst = t.mutable_data();
        std::copy(vals.begin(), vals.end(), dst.begin());
    }
    return model;
}

// ---- run outputs ----

void write_losses_csv(const fs::path& path, const RunRecord& rec, uint64_t config_hash) {
    std::ostringstream out;
    out << "# version=1\n";
    out << "# config_hash=" << hash_hex(config_hash) << "\n";
    out << "step,task,loss\n";
    for (const StepLoss& sl : rec.losses) {
        out << sl.step << ",total," << format_double(sl.total) << "\n";
        for (size_t i = 0; i < sl.per_task.size(); ++i) {
            if (std::isnan(sl.per_task[i])) continue;
            out << sl.step << ",task" << i << "," << format_double(sl.per_task[i]) << "\n";
        }
    }
    write_text_file_checked(path, out.str());
}

void write_metrics_csv(const fs::path& path, const MetricTable& table, uint64_t config_hash) {
    std::ostringstream out;
    out << "# version=1\n";
    out << "# config_hash=" << hash_hex(config_hash) << "\n";
    out << "task,metric,model,baseline,lower_is_better\n";
    for (const MetricRow& row : table.rows) {
        out << row.task << "," << row.metric << "," << format_double(row.model) << ",";
        if (row.has_baseline) out << format_double(row.baseline);
        out << "," << (row.lower_is_better ? 1 : 0) << "\n";
    }
    write_text_file_checked(path, out.str());
}

MetricTable read_metrics_csv(const fs::path& path) {
    const std::string text = read_text_file(path);
    MetricTable table;
    bool saw_header = false;
    int lineno = 0;
    for (const std::string& raw : split(text, '\n')) {
        ++lineno;
        const std::string line = trim(raw);
        if (line.empty() || line[0] == '#') continue;
        if (!saw_header) {
            if (line != "task,metric,model,baseline,lower_is_better") {
                throw IoError(path.string() + ":" + std::to_string(lineno) +
                              ": unexpected metrics header");
            }
            saw_header = true;
            continue;
        }
        const std::vector<std::string> cols = split(line, ',');
        if (cols.size() != 5) {
            throw IoError(path.string() + ":" + std::to_string(lineno) + ": expected 5 columns");
        }
        MetricRow row;
        row.task = cols[0];
        row.metric = cols[1];
        try {
            row.model = std::stod(cols[2]);
            if (!trim(cols[3]).empty()) {
                row.baseline = std::stod(cols[3]);
                row.has_baseline = true;
            }
            row.lower_is_better = std::stoi(cols[4]) != 0;
        } catch (const std::exception&) {
            throw IoError(path.string() + ":" + std::to_string(lineno) + ": bad numeric field");
        }
        table.rows.push_back(row);
    }
    if (!saw_header) throw IoError(path.string() + ": missing metrics header");
    return table;
}

namespace {

nlohmann::json snapshot_to_json(const ConflictSnapshot& snap) {
    nlohmann::json j;
    j["kind"] = "snapshot";
    j["step"] = snap.step;
    j["param_cos_hist"] = snap.param_cos_hist;
    nlohmann::json layers = nlohmann::json::array();
    for (const LayerSeverity& sev : snap.layers) {
        layers.push_back({{"layer", sev.layer},
                          {"range_score", sev.range_score},
                          {"null_score", sev.null_score}});
    }
    j["layers"] = layers;
    j["range_total"] = snap.range_total;
    j["null_total"] = snap.null_total;
    j["tokens_total"] = snap.tokens_total;
    return j;
}

}  // namespace

void write_conflicts_jsonl(const fs::path& path, const RunRecord& rec, uint64_t config_hash) {
    std::ostringstream out;
    nlohmann::json head;
    head["kind"] = "header";
    head["version"] = 1;
    head["config_hash"] = hash_hex(config_hash);
    out << head.dump() << "\n";
    for (const ConflictSnapshot& snap : rec.snapshots) {
        out << snapshot_to_json(snap).dump() << "\n";
    }
    write_text_file_checked(path, out.str());
}

std::vector<ConflictSnapshot> read_conflicts_jsonl(const fs::path& path) {
    const std::string text = read_text_file(path);
    std::vector<ConflictSnapshot> snaps;
    int lineno = 0;
    for (const std::string& raw : split(text, '\n')) {
        ++lineno;
        const std::string line = trim(raw);
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw IoError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
        if (j.value("kind", "") == "header") continue;
        ConflictSnapshot snap;
        snap.step = j.at("step").get<int>();
        const auto hist = j.at("param_cos_hist").get<std::vector<long>>();
        if (hist.size() != snap.param_cos_hist.size()) {
            throw IoError(path.string() + ":" + std::to_string(lineno) + ": bad histogram width");
        }
        std::copy(hist.begin(), hist.end(), snap.param_cos_hist.begin());
        for (const auto& lj : j.at("layers")) {
            LayerSeverity sev;
            sev.layer = lj.at("layer").get<int>();
            sev.range_score = lj.at("range_score").get<double>();
            sev.null_score = lj.at("null_score").get<double>();
            snap.layers.push_back(sev);
        }
        snap.range_total = j.at("range_total").get<long>();
        snap.null_total = j.at("null_total").get<long>();
        snap.tokens_total = j.at("tokens_total").get<long>();
        snaps.push_back(std::move(snap));
    }
    return snaps;
}

// ---- plan text ----

namespace {

LayerAction layer_action_from_string(const std::string& s) {
    if (s == "none") return LayerAction::None;
    if (s == "modulate") return LayerAction::Modulate;
    if (s == "expand") return LayerAction::Expand;
    if (s == "both") return LayerAction::Both;
    throw ContractError("unknown layer action '" + s + "'");
}

std::map<std::string, std::string> parse_record(const std::string& line) {
    std::map<std::string, std::string> out;
    for (const std::string& tok : split(line, ' ')) {
        if (tok.empty()) continue;
        const size_t eq = tok.find('=');
        if (eq == std::string::npos) throw ContractError("bad record token '" + tok + "'");
        out[tok.substr(0, eq)] = tok.substr(eq + 1);
    }
    return out;
}

}  // namespace

std::string plan_to_text(const ExpansionPlan& plan, uint64_t config_hash) {
    std::ostringstream out;
    out << "plan_version=1\n";
    out << "config_hash=" << hash_hex(config_hash) << "\n";
    out << "depth=" << plan.depth << "\n";
    out << "beta=" << format_double(plan.beta) << "\n";
    out << "tokens_per_task=" << plan.tokens_per_task << "\n";
    out << "strategy=" << to_string(plan.strategy) << "\n";
    out << "seed=" << plan.seed << "\n";
    out << "created_step=" << plan.created_step << "\n";
    for (int d = 0; d < plan.depth; ++d) {
        out << "layer=" << (d + 1) << " action=" << to_string(plan.actions[static_cast<size_t>(d)])
            << " range_score=" << format_double(plan.range_scores[static_cast<size_t>(d)])
            << " null_score=" << format_double(plan.null_scores[static_cast<size_t>(d)]) << "\n";
    }
    return out.str();
}

ExpansionPlan plan_from_text(const std::string& text, uint64_t* config_hash_out) {
    ExpansionPlan plan;
    std::map<std::string, std::string> head;
    std::vector<std::map<std::string, std::string>> records;
    for (const std::string& raw : split(text, '\n')) {
        const std::string line = trim(raw);
        if (line.empty() || line[0] == '#') continue;
        if (line.rfind("layer=", 0) == 0) {
            records.push_back(parse_record(line));
        } else {
            const size_t eq = line.find('=');
            if (eq == std::string::npos) throw ContractError("plan text: bad line '" + line + "'");
            head[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
        }
    }
    if (head["plan_version"] != "1") throw ContractError("plan text: unsupported plan_version");
    plan.depth = std::stoi(head.at("depth"));
    plan.beta = std::stod(head.at("beta"));
    plan.tokens_per_task = std::stoi(head.at("tokens_per_task"));
    plan.strategy = plan_strategy_from_string(head.at("strategy"));
    plan.seed = std::stoull(head.at("seed"));
    plan.created_step = std::stoi(head.at("created_step"));
    if (config_hash_out && head.count("config_hash")) {
        *config_hash_out = std::stoull(head.at("config_hash"), nullptr, 16);
    }
    plan.actions.assign(static_cast<size_t>(plan.depth), LayerAction::None);
    plan.range_scores.assign(static_cast<size_t>(plan.depth), 0.0);
    plan.null_scores.assign(static_cast<size_t>(plan.depth), 0.0);
    if (static_cast<int>(records.size()) != plan.depth) {
        throw ContractError("plan text: layer record count does not match depth");
    }
    for (const auto& rec : records) {
        const int layer = std::stoi(rec.at("layer"));
        if (layer < 1 || layer > plan.depth) throw ContractError("plan text: layer out of range");
        const size_t idx = static_cast<size_t>(layer - 1);
        plan.actions[idx] = layer_action_from_string(rec.at("action"));
        plan.range_scores[idx] = std::stod(rec.at("range_score"));
        plan.null_scores[idx] = std::stod(rec.at("null_score"));
    }
    plan.validate();
    return plan;
}

void write_plan_txt(const fs::path& path, const ExpansionPlan& plan, uint64_t config_hash) {
    write_text_file_checked(path, plan_to_text(plan, config_hash));
}

ExpansionPlan read_plan_txt(const fs::path& path, uint64_t* config_hash_out) {
    try {
        return plan_from_text(read_text_file(path), config_hash_out);
    } catch (const ContractError& e) {
        throw IoError(path.string() + ": " + e.what());
    }
}

// ---- conflict report ----

std::string conflict_report_text(const ConflictMeasurement& meas, double r,
                                 uint64_t config_hash) {
    std::ostringstream out;
    out << "conflict_report_version=1\n";
    out << "config_hash=" << hash_hex(config_hash) << "\n";
    out << "r=" << format_double(r) << "\n";
    out << "layers=" << meas.bases.size() << "\n";
    for (size_t d = 0; d < meas.bases.size(); ++d) {
        const SpectralBasis& basis = meas.bases[d];
        const ConflictStats& stats = meas.stats[d];
        double total_mass = 0.0, range_mass = 0.0;
        for (size_t i = 0; i < basis.values.size(); ++i) {
            total_mass += basis.values[i];
            if (static_cast<int>(i) < basis.split) range_mass += basis.values[i];
        }
        const double range_frac = total_mass > 0.0 ? range_mass / total_mass : 0.0;
        const LayerSeverity sev = aggregate_layer_conflicts(stats);
        out << "layer=" << basis.layer << " dim=" << basis.dim() << " m=" << basis.split
            << " range_mass=" << format_double(range_frac)
            << " null_mass=" << format_double(total_mass > 0.0 ? 1.0 - range_frac : 0.0)
            << " range_score=" << format_double(sev.range_score)
            << " null_score=" << format_double(sev.null_score)
            << " tokens=" << stats.total_tokens() << " range_conflicts=" << stats.total_range()
            << " null_conflicts=" << stats.total_null() << "\n";
        for (const PairConflicts& pc : stats.pairs) {
            out << "pair layer=" << basis.layer << " i=" << pc.task_i << " j=" << pc.task_j
                << " tokens=" << pc.tokens << " range_conflicts=" << pc.range_conflicts
                << " null_conflicts=" << pc.null_conflicts << " hist=";
            for (size_t b = 0; b < pc.cosine_hist.size(); ++b) {
                if (b) out << "|";
                out << pc.cosine_hist[b];
            }
            out << "\n";
        }
    }
    return out.str();
}

// ---- report schema ----

const std::string& report_schema_text() {
    static const std::string schema = R"JSON({
  "$schema": "http://json-schema.org/draft-07/schema#",
  "title": "dtme experiment report",
  "type": "object",
  "required": ["version", "runs", "pairs"],
  "additionalProperties": false,
  "properties": {
    "version": { "type": "integer" },
    "runs": {
      "type": "array",
      "items": {
        "type": "object",
        "required": [
          "dir", "mode", "seed", "config_hash", "metrics", "delta_m",
          "overhead_percent", "params_before", "params_after",
          "final_total_loss", "steps", "timing", "beta",
          "conflict_reduction_range", "conflict_reduction_null", "plan"
        ],
        "additionalProperties": false,
        "properties": {
          "dir": { "type": "string" },
          "mode": { "type": "string" },
          "seed": { "type": "integer" },
          "config_hash": { "type": "string" },
          "metrics": {
            "type": "array",
            "items": {
              "type": "object",
              "required": ["task", "metric", "model", "baseline", "lower_is_better"],
              "additionalProperties": false,
              "properties": {
                "task": { "type": "string" },
                "metric": { "type": "string" },
                "model": { "type": "number" },
                "baseline": { "type": ["number", "null"] },
                "lower_is_better": { "type": "boolean" }
              }
            }
          },
          "delta_m": { "type": ["number", "null"] },
          "overhead_percent": { "type": "number" },
          "params_before": { "type": "integer" },
          "params_after": { "type": "integer" },
          "final_total_loss": { "type": "number" },
          "steps": { "type": "integer" },
          "timing": { "type": "number" },
          "beta": { "type": "number" },
          "conflict_reduction_range": { "type": "number" },
          "conflict_reduction_null": { "type": "number" },
          "plan": {
            "type": ["object", "null"],
            "required": ["strategy", "created_step", "modulated_layers", "expanded_layers"],
            "additionalProperties": false,
            "properties": {
              "strategy": { "type": "string" },
              "created_step": { "type": "integer" },
              "modulated_layers": { "type": "array", "items": { "type": "integer" } },
              "expanded_layers": { "type": "array", "items": { "type": "integer" } }
            }
          }
        }
      }
    },
    "pairs": {
      "type": "array",
      "items": {
        "type": "object",
        "required": ["seed", "baseline_mode", "model_mode", "delta_m_baseline",
                     "delta_m_model", "delta_m_gain"],
        "additionalProperties": false,
        "properties": {
          "seed": { "type": "integer" },
          "baseline_mode": { "type": "string" },
          "model_mode": { "type": "string" },
          "delta_m_baseline": { "type": "number" },
          "delta_m_model": { "type": "number" },
          "delta_m_gain": { "type": "number" }
        }
      }
    },
    "means": {
      "type": "object",
      "additionalProperties": { "type": "number" }
    }
  }
}
)JSON";
    return schema;
}

namespace {

bool type_matches(const nlohmann::json& value, const std::string& type) {
    if (type == "object") return value.is_object();
    if (type == "array") return value.is_array();
    if (type == "string") return value.is_string();
    if (type == "integer") return value.is_number_integer() || value.is_number_unsigned();
    if (type == "number") return value.is_number();
    if (type == "boolean") return value.is_boolean();
    if (type == "null") return value.is_null();
    throw ContractError("schema: unsupported type '" + type + "'");
}

void validate_node(const nlohmann::json& value, const nlohmann::json& schema,
                   const std::string& path) {
    if (schema.contains("type")) {
        const auto& t = schema["type"];
        bool ok = false;
        if (t.is_string()) {
            ok = type_matches(value, t.get<std::string>());
        } else {
            for (const auto& alt : t) {
                if (type_matches(value, alt.get<std::string>())) {
                    ok = true;
                    break;
                }
            }
        }
        if (!ok) throw ContractError("schema violation at " + path + ": wrong type");
    }
    if (value.is_null()) return;
    if (schema.contains("required") && value.is_object()) {
        for (const auto& key : schema["required"]) {
            if (!value.contains(key.get<std::string>())) {
                throw ContractError("schema violation at " + path + ": missing required '" +
                                    key.get<std::string>() + "'");
            }
        }
    }
    if (value.is_object()) {
        const bool has_props = schema.contains("properties");
        const bool closed = schema.contains("additionalProperties") &&
                            schema["additionalProperties"].is_boolean() &&
                            !schema["additionalProperties"].get<bool>();
        const bool typed_extra = schema.contains("additionalProperties") &&
                                 schema["additionalProperties"].is_object();
        for (const auto& [key, child] : value.items()) {
            if (has_props && schema["properties"].contains(key)) {
                validate_node(child, schema["properties"][key], path + "." + key);
            } else if (typed_extra) {
                validate_node(child, schema["additionalProperties"], path + "." + key);
            } else if (closed) {
                throw ContractError("schema violation at " + path + ": unexpected key '" + key +
                                    "'");
            }
        }
    }
    if (value.is_array() && schema.contains("items")) {
        for (size_t i = 0; i < value.size(); ++i) {
            validate_node(value[i], schema["items"], path + "[" + std::to_string(i) + "]");
        }
    }
}

}  // namespace

void validate_against_schema(const nlohmann::json& doc, const nlohmann::json& schema) {
    validate_node(doc, schema, "$");
}

// ---- run directory ----

void prepare_run_dir(const fs::path& dir, bool force) {
    std::error_code ec;
    if (fs::exists(dir, ec)) {
        if (!fs::is_directory(dir, ec)) {
            throw IoError(dir.string() + " exists and is not a directory");
        }
        if (!fs::is_empty(dir, ec) && !force) {
            throw IoError(dir.string() + " is not empty (pass --force to reuse it)");
        }
        // A reused directory may hold a lock left by a crashed run.
        if (force) fs::remove(dir / ".lock", ec);
    } else {
        fs::create_directories(dir);
    }
}

DirLock::DirLock(const fs::path& dir) : lock_path_(dir / ".lock") {
    fd_ = ::open(lock_path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd_ < 0) {
        if (errno == EEXIST) {
            throw IoError(dir.string() + " is locked by another invocation");
        }
        throw IoError("cannot create lock in " + dir.string() + ": " + std::strerror(errno));
    }
}

DirLock::~DirLock() {
    if (fd_ >= 0) {
        ::close(fd_);
        std::error_code ec;
        fs::remove(lock_path_, ec);
    }
}

}  // namespace dtme
