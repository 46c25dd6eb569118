#pragma once

// Flat dotted-key configuration: "key = value" lines, '#' comments, a fixed
// schema with defaults. Unknown keys, duplicates and type mismatches are
// rejected with the offending key and line. Serialization is canonical
// (sorted keys), so parse -> serialize -> parse is the identity.

#include <cstdlib>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "attnlab/io.hpp"
#include "attnlab/tensor.hpp"

namespace attnlab {

enum class ConfigType { Int, Float, Bool, String };

struct ConfigItem {
  ConfigType type;
  const char* def;
};

inline const std::map<std::string, ConfigItem>& config_schema() {
  static const std::map<std::string, ConfigItem> schema{
      {"model.encoder_layers", {ConfigType::Int, "6"}},
      {"model.encoder_units", {ConfigType::Int, "64"}},
      {"model.decoder_units", {ConfigType::Int, "128"}},
      {"model.attention_dim", {ConfigType::Int, "128"}},
      {"model.input_dim", {ConfigType::Int, "40"}},
      {"model.dropout", {ConfigType::Float, "0.3"}},
      {"features.mean_subtract", {ConfigType::Bool, "false"}},
      {"loss.label_smoothing", {ConfigType::Float, "0.1"}},
      {"loss.ctc_weight", {ConfigType::Float, "0.5"}},
      {"train.epochs", {ConfigType::Int, "50"}},
      {"train.lr", {ConfigType::Float, "0.001"}},
      {"train.warmup_steps", {ConfigType::Int, "500"}},
      {"train.newbob_threshold", {ConfigType::Float, "0.01"}},
      {"train.newbob_decay", {ConfigType::Float, "0.7"}},
      {"train.lr_floor", {ConfigType::Float, "1e-6"}},
      {"train.clip_norm", {ConfigType::Float, "5.0"}},
      {"train.batch_frames", {ConfigType::Int, "4000"}},
      {"train.stage_epochs", {ConfigType::Int, "2"}},
      {"train.pretrain", {ConfigType::Bool, "true"}},
      {"train.final_reduction", {ConfigType::Int, "8"}},
      {"data.max_chars", {ConfigType::Int, "0"}},
      {"lm.preset", {ConfigType::String, "desk"}},
      {"lm.embed_dim", {ConfigType::Int, "32"}},
      {"lm.units", {ConfigType::Int, "128"}},
      {"lm.layers", {ConfigType::Int, "1"}},
      {"lm.dropout", {ConfigType::Float, "0.2"}},
      {"lm.lr", {ConfigType::Float, "1.0"}},
      {"lm.clip_norm", {ConfigType::Float, "5.0"}},
      {"lm.epochs", {ConfigType::Int, "10"}},
      {"lm.order", {ConfigType::Int, "4"}},
      {"search.beam", {ConfigType::Int, "12"}},
      {"search.lm_weight", {ConfigType::Float, "0.23"}},
  };
  return schema;
}

class Config {
 public:
  Config() {
    for (const auto& [k, item] : config_schema()) values_[k] = item.def;
  }

  static Config parse_string(const std::string& text, const std::string& what = "config") {
    Config cfg;
    size_t lineno = 0;
    std::set<std::string> seen;
    std::string cur;
    auto handle = [&](std::string line) {
      ++lineno;
      size_t hash = line.find('#');
      if (hash != std::string::npos) line.resize(hash);
      line = trim_(line);
      if (line.empty()) return;
      size_t eq = line.find('=');
      if (eq == std::string::npos)
        throw FormatError(what + ":" + std::to_string(lineno) + ": expected key = value");
      std::string key = trim_(line.substr(0, eq));
      std::string value = trim_(line.substr(eq + 1));
      if (!config_schema().count(key))
        throw FormatError(what + ":" + std::to_string(lineno) + ": unknown key " + key);
      if (!seen.insert(key).second)
        throw FormatError(what + ":" + std::to_string(lineno) + ": duplicate key " + key);
      cfg.set(key, value, lineno, what);
    };
    for (char ch : text) {
      if (ch == '\n') {
        handle(cur);
        cur.clear();
      } else {
        cur.push_back(ch);
      }
    }
    if (!cur.empty()) handle(cur);
    return cfg;
  }

  static Config parse_file(const std::string& path) { return parse_string(read_file(path), path); }

  void set(const std::string& key, const std::string& value, size_t lineno = 0,
           const std::string& what = "config") {
    auto it = config_schema().find(key);
    if (it == config_schema().end()) throw FormatError(what + ": unknown key " + key);
    std::string where = lineno ? what + ":" + std::to_string(lineno) : what;
    validate_(it->second.type, value, where, key);
    values_[key] = value;
    explicit_.insert(key);
  }

  bool is_set(const std::string& key) const { return explicit_.count(key) > 0; }

  int geti(const std::string& key) const { return static_cast<int>(std::strtol(raw_(key).c_str(), nullptr, 10)); }
  real getf(const std::string& key) const { return std::strtod(raw_(key).c_str(), nullptr); }
  bool getb(const std::string& key) const { return raw_(key) == "true"; }
  const std::string& gets(const std::string& key) const { return raw_(key); }

  // sorted "key = value" lines covering the full resolved schema
  std::string canonical() const {
    std::string out;
    for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
    return out;
  }

 private:
  static std::string trim_(const std::string& s) {
    size_t b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    size_t e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  }

  static void validate_(ConfigType type, const std::string& value, const std::string& where,
                        const std::string& key) {
    const char* s = value.c_str();
    char* end = nullptr;
    switch (type) {
      case ConfigType::Int:
        std::strtol(s, &end, 10);
        if (value.empty() || *end != '\0')
          throw FormatError(where + ": key " + key + " expects an integer, got '" + value + "'");
        break;
      case ConfigType::Float:
        std::strtod(s, &end);
        if (value.empty() || *end != '\0')
          throw FormatError(where + ": key " + key + " expects a number, got '" + value + "'");
        break;
      case ConfigType::Bool:
        if (value != "true" && value != "false")
          throw FormatError(where + ": key " + key + " expects true or false, got '" + value + "'");
        break;
      case ConfigType::String:
        break;
    }
  }

  const std::string& raw_(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw FormatError("config: unknown key " + key);
    return it->second;
  }

  std::map<std::string, std::string> values_;
  std::set<std::string> explicit_;
};

}  // namespace attnlab
