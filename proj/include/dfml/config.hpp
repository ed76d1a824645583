#pragma once
// Declarative run configuration: a flat TOML subset (sections of scalar
// key = value pairs), strict schema resolution, and a canonical echo of the
// resolved state for the artifact directory.

#include <cstdlib>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "common.hpp"
#include "data.hpp"
#include "meta_train.hpp"
#include "zoo.hpp"

namespace dfml {

struct TomlTable {
    // section -> key -> raw value text; top-level keys live under ""
    std::map<std::string, std::map<std::string, std::string>> sections;
};

namespace detail {

inline std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

// Removes a trailing comment; # inside a quoted value is literal.
inline std::string strip_comment(const std::string& s) {
    bool quoted = false;
    for (size_t i = 0; i < s.size(); ++i) {
        if (s[i] == '"') quoted = !quoted;
        if (s[i] == '#' && !quoted) return s.substr(0, i);
    }
    return s;
}

}  // namespace detail

inline TomlTable parse_toml(const std::string& text) {
    TomlTable t;
    std::string section;
    std::istringstream in(text);
    std::string raw;
    int ln = 0;
    while (std::getline(in, raw)) {
        ++ln;
        std::string line = detail::trim(detail::strip_comment(raw));
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']' || line.size() < 3)
                throw ValidationError("config line " + std::to_string(ln) + ": malformed section header");
            section = detail::trim(line.substr(1, line.size() - 2));
            t.sections[section];
            continue;
        }
        size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ValidationError("config line " + std::to_string(ln) + ": expected key = value");
        std::string key = detail::trim(line.substr(0, eq));
        std::string val = detail::trim(line.substr(eq + 1));
        if (key.empty() || val.empty())
            throw ValidationError("config line " + std::to_string(ln) + ": empty key or value");
        t.sections[section][key] = val;
    }
    return t;
}

// "section.key=value" or "key=value" for top-level entries.
inline void apply_override(TomlTable& t, const std::string& kv) {
    size_t eq = kv.find('=');
    require(eq != std::string::npos && eq > 0, "override needs key=value: " + kv);
    std::string key = detail::trim(kv.substr(0, eq));
    std::string val = detail::trim(kv.substr(eq + 1));
    require(!val.empty(), "override has empty value: " + kv);
    size_t dot = key.find('.');
    std::string section = dot == std::string::npos ? "" : key.substr(0, dot);
    std::string name = dot == std::string::npos ? key : key.substr(dot + 1);
    require(!name.empty(), "override has empty key: " + kv);
    t.sections[section][name] = val;
}

struct RunConfig {
    struct {
        int num_domains = 3, classes_per_domain = 12, samples_per_class = 24, image_size = 16, channels = 3;
        double noise_sigma = 0.05, channel_shift = 0.1;
    } dataset;
    struct {
        int n = 8, way = 5;
        std::string policy = "mixed";
        double lr = 2e-3;
        int epochs = 8, batch = 32;
    } zoo;
    struct {
        int steps = 200;
        double lr = 1e-3;
        int per_class = 6, latent = 256, nf = 8;
    } inversion;
    struct {
        int c = 2;
        std::string probe;  // empty: pretrain a probe on a held-out domain
    } grouping;
    TrainConfig train;
    struct {
        EpisodeSpec spec{5, 5, 5};
        int episodes = 120;
        double adapt_lr = 1e-2;
        int adapt_steps = 10;
    } eval;
    struct {
        int epochs = 60, per_class = 6, recover_steps = 60, eval_episodes = 40;
    } ag;
    uint64_t seed = 0;
    bool seed_set = false;
    std::string output_dir = "out";

    void validate() const {
        require(seed_set, "config: seed is mandatory (top-level `seed = N` or --seed)");
        require(dataset.num_domains >= 1 && dataset.classes_per_domain >= 4 && dataset.samples_per_class >= 2,
                "config: dataset counts too small");
        require(dataset.image_size >= 8 && dataset.channels >= 1, "config: bad dataset shape");
        require(zoo.n >= 1 && zoo.way >= 2 && zoo.epochs >= 1 && zoo.batch >= 1, "config: bad zoo section");
        require(zoo.policy == "fixed" || zoo.policy == "mixed", "config: zoo.policy must be fixed or mixed");
        require(inversion.steps >= 1 && inversion.per_class >= 1 && inversion.latent >= 1 && inversion.nf >= 1,
                "config: bad inversion section");
        require(grouping.c >= 1, "config: grouping.c must be >= 1");
        dfml::validate(train);
        require(eval.spec.way >= 2 && eval.spec.shot >= 1 && eval.spec.query >= 1 && eval.episodes >= 1,
                "config: bad eval section");
        require(eval.spec.shot + eval.spec.query <= dataset.samples_per_class,
                "config: eval shot+query exceeds samples per class");
        require(eval.adapt_steps >= 0 && std::isfinite(eval.adapt_lr), "config: bad eval adaptation");
        require(ag.epochs >= 1 && ag.per_class >= 1 && ag.recover_steps >= 1 && ag.eval_episodes >= 1,
                "config: bad ag section");
        require(!output_dir.empty(), "config: output_dir must not be empty");
    }
};

namespace detail {

inline long long cfg_int(const std::string& raw, const std::string& where) {
    size_t pos = 0;
    long long v = 0;
    try {
        v = std::stoll(raw, &pos);
    } catch (...) {
        throw ValidationError("config: " + where + ": expected integer, got '" + raw + "'");
    }
    if (pos != raw.size()) throw ValidationError("config: " + where + ": expected integer, got '" + raw + "'");
    return v;
}

inline double cfg_double(const std::string& raw, const std::string& where) {
    size_t pos = 0;
    double v = 0;
    try {
        v = std::stod(raw, &pos);
    } catch (...) {
        throw ValidationError("config: " + where + ": expected number, got '" + raw + "'");
    }
    if (pos != raw.size()) throw ValidationError("config: " + where + ": expected number, got '" + raw + "'");
    return v;
}

inline bool cfg_bool(const std::string& raw, const std::string& where) {
    if (raw == "true") return true;
    if (raw == "false") return false;
    throw ValidationError("config: " + where + ": expected true or false, got '" + raw + "'");
}

inline std::string cfg_string(const std::string& raw, const std::string& where) {
    if (raw.size() >= 2 && raw.front() == '"' && raw.back() == '"') return raw.substr(1, raw.size() - 2);
    if (raw.find('"') != std::string::npos) throw ValidationError("config: " + where + ": unbalanced quotes");
    return raw;
}

using KeySetter = std::function<void(RunConfig&, const std::string&, const std::string&)>;

inline const std::map<std::string, std::map<std::string, KeySetter>>& config_schema() {
#define DFML_INT(field) [](RunConfig& c, const std::string& r, const std::string& w) { c.field = int(cfg_int(r, w)); }
#define DFML_DBL(field) [](RunConfig& c, const std::string& r, const std::string& w) { c.field = cfg_double(r, w); }
#define DFML_BOOL(field) [](RunConfig& c, const std::string& r, const std::string& w) { c.field = cfg_bool(r, w); }
#define DFML_STR(field) [](RunConfig& c, const std::string& r, const std::string& w) { c.field = cfg_string(r, w); }
    static const std::map<std::string, std::map<std::string, KeySetter>> schema = {
        {"",
         {{"seed",
           [](RunConfig& c, const std::string& r, const std::string& w) {
               long long v = cfg_int(r, w);
               if (v < 0) throw ValidationError("config: " + w + ": seed must be nonnegative");
               c.seed = uint64_t(v);
               c.seed_set = true;
           }},
          {"output_dir", DFML_STR(output_dir)}}},
        {"dataset",
         {{"num_domains", DFML_INT(dataset.num_domains)},
          {"classes_per_domain", DFML_INT(dataset.classes_per_domain)},
          {"samples_per_class", DFML_INT(dataset.samples_per_class)},
          {"image_size", DFML_INT(dataset.image_size)},
          {"channels", DFML_INT(dataset.channels)},
          {"noise_sigma", DFML_DBL(dataset.noise_sigma)},
          {"channel_shift", DFML_DBL(dataset.channel_shift)}}},
        {"zoo",
         {{"n", DFML_INT(zoo.n)},
          {"way", DFML_INT(zoo.way)},
          {"arch_policy", DFML_STR(zoo.policy)},
          {"lr", DFML_DBL(zoo.lr)},
          {"epochs", DFML_INT(zoo.epochs)},
          {"batch", DFML_INT(zoo.batch)}}},
        {"inversion",
         {{"steps", DFML_INT(inversion.steps)},
          {"lr", DFML_DBL(inversion.lr)},
          {"per_class", DFML_INT(inversion.per_class)},
          {"latent", DFML_INT(inversion.latent)},
          {"nf", DFML_INT(inversion.nf)}}},
        {"grouping", {{"c", DFML_INT(grouping.c)}, {"probe", DFML_STR(grouping.probe)}}},
        {"train",
         {{"beta", DFML_DBL(train.beta)},
          {"m", DFML_INT(train.m)},
          {"epochs", DFML_INT(train.epochs)},
          {"meta_lr", DFML_DBL(train.meta_lr)},
          {"inner_lr", DFML_DBL(train.inner_lr)},
          {"outer_lr", DFML_DBL(train.outer_lr)},
          {"bank_capacity", DFML_INT(train.bank_capacity)},
          {"replay_way", DFML_INT(train.replay.way)},
          {"replay_shot", DFML_INT(train.replay.shot)},
          {"replay_query", DFML_INT(train.replay.query)},
          {"regularization_on", DFML_BOOL(train.regularization_on)},
          {"grouping_on", DFML_BOOL(train.grouping_on)},
          {"recover_steps", DFML_INT(train.recover_steps)},
          {"recover_lr", DFML_DBL(train.recover_lr)},
          {"per_class", DFML_INT(train.per_class)},
          {"gen_latent", DFML_INT(train.gen_latent)},
          {"gen_nf", DFML_INT(train.gen_nf)},
          {"way", DFML_INT(train.way)},
          {"meta_filters", DFML_INT(train.meta_filters)},
          {"inner_steps", DFML_INT(train.inner_steps)},
          {"second_order", DFML_BOOL(train.second_order)},
          {"replay_igr", DFML_BOOL(train.replay_igr)},
          {"kd_temperature", DFML_DBL(train.kd_temperature)}}},
        {"eval",
         {{"way", DFML_INT(eval.spec.way)},
          {"shot", DFML_INT(eval.spec.shot)},
          {"query", DFML_INT(eval.spec.query)},
          {"episodes", DFML_INT(eval.episodes)},
          {"adapt_lr", DFML_DBL(eval.adapt_lr)},
          {"adapt_steps", DFML_INT(eval.adapt_steps)}}},
        {"ag",
         {{"epochs", DFML_INT(ag.epochs)},
          {"per_class", DFML_INT(ag.per_class)},
          {"recover_steps", DFML_INT(ag.recover_steps)},
          {"eval_episodes", DFML_INT(ag.eval_episodes)}}},
    };
#undef DFML_INT
#undef DFML_DBL
#undef DFML_BOOL
#undef DFML_STR
    return schema;
}

}  // namespace detail

// Strict: unknown sections or keys are errors so typos in --set cannot pass
// silently. Field validation happens afterwards in RunConfig::validate.
inline RunConfig resolve_config(const TomlTable& t) {
    RunConfig cfg;
    const auto& schema = detail::config_schema();
    for (const auto& [sec, kvs] : t.sections) {
        auto s = schema.find(sec);
        if (s == schema.end()) throw ValidationError("config: unknown section [" + sec + "]");
        for (const auto& [key, raw] : kvs) {
            auto k = s->second.find(key);
            if (k == s->second.end())
                throw ValidationError("config: unknown key " + (sec.empty() ? key : sec + "." + key));
            k->second(cfg, raw, sec.empty() ? key : sec + "." + key);
        }
    }
    return cfg;
}

// Canonical echo; resolve(parse(render(c))) reproduces c.
inline std::string render_toml(const RunConfig& c) {
    std::ostringstream o;
    o.precision(17);
    o << "seed = " << c.seed << "\n";
    o << "output_dir = \"" << c.output_dir << "\"\n\n";
    o << "[dataset]\n";
    o << "num_domains = " << c.dataset.num_domains << "\n";
    o << "classes_per_domain = " << c.dataset.classes_per_domain << "\n";
    o << "samples_per_class = " << c.dataset.samples_per_class << "\n";
    o << "image_size = " << c.dataset.image_size << "\n";
    o << "channels = " << c.dataset.channels << "\n";
    o << "noise_sigma = " << c.dataset.noise_sigma << "\n";
    o << "channel_shift = " << c.dataset.channel_shift << "\n\n";
    o << "[zoo]\n";
    o << "n = " << c.zoo.n << "\n";
    o << "way = " << c.zoo.way << "\n";
    o << "arch_policy = \"" << c.zoo.policy << "\"\n";
    o << "lr = " << c.zoo.lr << "\n";
    o << "epochs = " << c.zoo.epochs << "\n";
    o << "batch = " << c.zoo.batch << "\n\n";
    o << "[inversion]\n";
    o << "steps = " << c.inversion.steps << "\n";
    o << "lr = " << c.inversion.lr << "\n";
    o << "per_class = " << c.inversion.per_class << "\n";
    o << "latent = " << c.inversion.latent << "\n";
    o << "nf = " << c.inversion.nf << "\n\n";
    o << "[grouping]\n";
    o << "c = " << c.grouping.c << "\n";
    o << "probe = \"" << c.grouping.probe << "\"\n\n";
    o << "[train]\n";
    o << "beta = " << c.train.beta << "\n";
    o << "m = " << c.train.m << "\n";
    o << "epochs = " << c.train.epochs << "\n";
    o << "meta_lr = " << c.train.meta_lr << "\n";
    o << "inner_lr = " << c.train.inner_lr << "\n";
    o << "outer_lr = " << c.train.outer_lr << "\n";
    o << "bank_capacity = " << c.train.bank_capacity << "\n";
    o << "replay_way = " << c.train.replay.way << "\n";
    o << "replay_shot = " << c.train.replay.shot << "\n";
    o << "replay_query = " << c.train.replay.query << "\n";
    o << "regularization_on = " << (c.train.regularization_on ? "true" : "false") << "\n";
    o << "grouping_on = " << (c.train.grouping_on ? "true" : "false") << "\n";
    o << "recover_steps = " << c.train.recover_steps << "\n";
    o << "recover_lr = " << c.train.recover_lr << "\n";
    o << "per_class = " << c.train.per_class << "\n";
    o << "gen_latent = " << c.train.gen_latent << "\n";
    o << "gen_nf = " << c.train.gen_nf << "\n";
    o << "way = " << c.train.way << "\n";
    o << "meta_filters = " << c.train.meta_filters << "\n";
    o << "inner_steps = " << c.train.inner_steps << "\n";
    o << "second_order = " << (c.train.second_order ? "true" : "false") << "\n";
    o << "replay_igr = " << (c.train.replay_igr ? "true" : "false") << "\n";
    o << "kd_temperature = " << c.train.kd_temperature << "\n\n";
    o << "[eval]\n";
    o << "way = " << c.eval.spec.way << "\n";
    o << "shot = " << c.eval.spec.shot << "\n";
    o << "query = " << c.eval.spec.query << "\n";
    o << "episodes = " << c.eval.episodes << "\n";
    o << "adapt_lr = " << c.eval.adapt_lr << "\n";
    o << "adapt_steps = " << c.eval.adapt_steps << "\n\n";
    o << "[ag]\n";
    o << "epochs = " << c.ag.epochs << "\n";
    o << "per_class = " << c.ag.per_class << "\n";
    o << "recover_steps = " << c.ag.recover_steps << "\n";
    o << "eval_episodes = " << c.ag.eval_episodes << "\n";
    return o.str();
}

}  // namespace dfml
