#pragma once

// Campaign configuration: one hierarchical YAML file, keys sorted on output,
// validation errors anchored to the line (or CLI flag) that set the value.

#include <yaml-cpp/yaml.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "catscope/dm_model.hpp"
#include "catscope/error.hpp"
#include "catscope/measurement.hpp"

namespace catscope::config {

struct Thresholds {
  double compass = 84.0;
  double vacuum = 1e5;

  bool operator==(const Thresholds&) const = default;
};

/// Mimic-displacement calibration: every alpha_sq probe plus the vacuum baseline.
struct CalibrationSchedule {
  long long trials = 10000;  // per injection point
  std::vector<double> alpha_sq{4.0, 8.0, 12.0};
  std::vector<double> n_inj_compass{0.0, 0.002, 0.004, 0.006, 0.008};
  std::vector<double> n_inj_vacuum{0.0, 0.02, 0.04, 0.06, 0.08};

  bool operator==(const CalibrationSchedule&) const = default;
};

struct SearchSchedule {
  long long trials = 20000;  // per tau point
  std::vector<double> alpha_sq{12.0};
  bool vacuum = true;
  std::vector<double> tau{20e-6, 50e-6, 80e-6, 110e-6, 140e-6};
  double tau_max = 0.0;      // 0 means tau_DM
  double epsilon_inj = 0.0;  // synthetic DM signal, 0 for none
  double offres_span_hz = 5e4;
  int offres_points = 101;

  bool operator==(const SearchSchedule&) const = default;
};

struct ScanSchedule {
  int bins = 16;
  double spacing_hz = 6e3;
  long long trials = 20000;  // per bin
  int inject_bin = -1;
  double epsilon_inj = 0.0;
  std::vector<double> t1c;   // per bin; empty uses device.T1c

  bool operator==(const ScanSchedule&) const = default;
};

struct CampaignConfig {
  std::uint64_t master_seed = 1;
  int workers = 1;
  int repeats = 20;
  bool write_records = true;
  measurement::DeviceParams device;
  dm::HaloParams halo;
  dm::SearchPoint point;
  Thresholds thresholds;
  CalibrationSchedule calibration;
  SearchSchedule search;
  ScanSchedule scan;

  bool operator==(const CampaignConfig&) const = default;
};

using FieldRef = std::variant<double*, int*, long long*, std::uint64_t*, bool*, std::vector<double>*>;

/// Every configurable leaf as (dotted path, storage).
inline std::vector<std::pair<std::string, FieldRef>> fields(CampaignConfig& c) {
  auto& d = c.device;
  return {
      {"master_seed", &c.master_seed},
      {"workers", &c.workers},
      {"repeats", &c.repeats},
      {"write_records", &c.write_records},
      {"device.omega_c", &d.omega_c},
      {"device.chi", &d.chi},
      {"device.T1c", &d.T1c},
      {"device.T1q", &d.T1q},
      {"device.T2q", &d.T2q},
      {"device.n_c", &d.n_c},
      {"device.n_q", &d.n_q},
      {"device.t_m", &d.t_m},
      {"device.readout_Fge", &d.readout_Fge},
      {"device.readout_Fge_inv", &d.readout_Fge_inv},
      {"device.p_d", &d.p_d},
      {"device.p_leak", &d.p_leak},
      {"halo.rho_dm", &c.halo.rho_dm},
      {"halo.v_vir", &c.halo.v_vir},
      {"halo.v_g", &c.halo.v_g},
      {"point.m_dm", &c.point.m_dm},
      {"point.omega_c", &c.point.omega_c},
      {"point.v_eff", &c.point.v_eff},
      {"thresholds.compass", &c.thresholds.compass},
      {"thresholds.vacuum", &c.thresholds.vacuum},
      {"calibration.trials", &c.calibration.trials},
      {"calibration.alpha_sq", &c.calibration.alpha_sq},
      {"calibration.n_inj_compass", &c.calibration.n_inj_compass},
      {"calibration.n_inj_vacuum", &c.calibration.n_inj_vacuum},
      {"search.trials", &c.search.trials},
      {"search.alpha_sq", &c.search.alpha_sq},
      {"search.vacuum", &c.search.vacuum},
      {"search.tau", &c.search.tau},
      {"search.tau_max", &c.search.tau_max},
      {"search.epsilon_inj", &c.search.epsilon_inj},
      {"search.offres_span_hz", &c.search.offres_span_hz},
      {"search.offres_points", &c.search.offres_points},
      {"scan.bins", &c.scan.bins},
      {"scan.spacing_hz", &c.scan.spacing_hz},
      {"scan.trials", &c.scan.trials},
      {"scan.inject_bin", &c.scan.inject_bin},
      {"scan.epsilon_inj", &c.scan.epsilon_inj},
      {"scan.t1c", &c.scan.t1c},
  };
}

/// Where each key was set: "config.yaml:12" or "--trials".
using SourceMap = std::map<std::string, std::string>;

namespace detail {

inline std::string format_number(double x) {
  if (std::isnan(x)) return ".nan";
  if (std::isinf(x)) return x > 0 ? ".inf" : "-.inf";
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, x);
  std::string s(buf, r.ptr);
  if (s.find_first_of(".en") == std::string::npos) s += ".0";
  return s;
}

inline std::string format_leaf(const FieldRef& f) {
  return std::visit(
      [](auto* p) -> std::string {
        using T = std::remove_pointer_t<decltype(p)>;
        if constexpr (std::is_same_v<T, double>) {
          return format_number(*p);
        } else if constexpr (std::is_same_v<T, bool>) {
          return *p ? "true" : "false";
        } else if constexpr (std::is_same_v<T, std::vector<double>>) {
          std::string s = "[";
          for (std::size_t i = 0; i < p->size(); ++i) s += (i ? ", " : "") + format_number((*p)[i]);
          return s + "]";
        } else {
          return std::to_string(*p);
        }
      },
      f);
}

inline std::string anchor(const SourceMap& src, const std::string& key) {
  auto it = src.find(key);
  if (it != src.end()) return it->second + ": ";
  const auto dot = key.find('.');
  if (dot != std::string::npos) {
    it = src.find(key.substr(0, dot));
    if (it != src.end()) return it->second + ": ";
  }
  return "";
}

inline void set_leaf(const FieldRef& f, const YAML::Node& node, const std::string& where,
                     const std::string& key) {
  const auto fail = [&](const std::string& what) {
    throw Error(Errc::ConfigError, where + ": " + key + " expects " + what);
  };
  std::visit(
      [&](auto* p) {
        using T = std::remove_pointer_t<decltype(p)>;
        if constexpr (std::is_same_v<T, std::vector<double>>) {
          if (!node.IsSequence()) fail("a list of numbers");
          std::vector<double> v;
          for (const auto& e : node) {
            if (!e.IsScalar()) fail("a list of numbers");
            try {
              v.push_back(e.as<double>());
            } catch (const YAML::Exception&) {
              fail("a list of numbers");
            }
          }
          *p = std::move(v);
        } else {
          if (!node.IsScalar()) fail("a scalar");
          try {
            if constexpr (std::is_same_v<T, std::uint64_t>) {
              if (!node.Scalar().empty() && node.Scalar()[0] == '-') fail("a non-negative integer");
            }
            *p = node.as<T>();
          } catch (const YAML::Exception&) {
            if constexpr (std::is_same_v<T, double>) fail("a number");
            else if constexpr (std::is_same_v<T, bool>) fail("true or false");
            else fail("an integer");
          }
        }
      },
      f);
}

inline void walk(const YAML::Node& node, const std::string& prefix, const std::string& file,
                 std::map<std::string, FieldRef>& reg, SourceMap& src) {
  for (const auto& kv : node) {
    const std::string key = prefix + kv.first.as<std::string>();
    const std::string where = file + ":" + std::to_string(kv.first.Mark().line + 1);
    const auto it = reg.find(key);
    if (it != reg.end()) {
      set_leaf(it->second, kv.second, where, key);
      src[key] = where;
      continue;
    }
    const bool section = std::any_of(reg.begin(), reg.end(), [&](const auto& e) {
      return e.first.rfind(key + ".", 0) == 0;
    });
    if (!section) throw Error(Errc::ConfigError, where + ": unknown key '" + key + "'");
    if (!kv.second.IsMap()) throw Error(Errc::ConfigError, where + ": '" + key + "' must be a mapping");
    src[key] = where;
    walk(kv.second, key + ".", file, reg, src);
  }
}

}  // namespace detail

/// Sorted-key YAML text; parse(serialize(c)) == c.
inline std::string to_yaml(const CampaignConfig& cfg) {
  CampaignConfig copy = cfg;
  std::map<std::string, std::string> leaves;
  for (const auto& [k, f] : fields(copy)) leaves[k] = detail::format_leaf(f);
  std::map<std::string, std::map<std::string, std::string>> sections;
  std::map<std::string, std::string> top;
  for (const auto& [k, v] : leaves) {
    const auto dot = k.find('.');
    if (dot == std::string::npos)
      top[k] = v;
    else
      sections[k.substr(0, dot)][k.substr(dot + 1)] = v;
  }
  std::map<std::string, std::string> blocks;
  for (const auto& [k, v] : top) blocks[k] = k + ": " + v + "\n";
  for (const auto& [s, kv] : sections) {
    std::string b = s + ":\n";
    for (const auto& [k, v] : kv) b += "  " + k + ": " + v + "\n";
    blocks[s] = b;
  }
  std::string out;
  for (const auto& [k, b] : blocks) out += b;
  return out;
}

/// Parse YAML text over the defaults; unknown keys and type errors cite the line.
inline CampaignConfig from_yaml(const std::string& text, const std::string& file = "config",
                                SourceMap* sources = nullptr) {
  CampaignConfig cfg;
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::ParserException& e) {
    throw Error(Errc::ConfigError, file + ":" + std::to_string(e.mark.line + 1) + ": " + e.msg);
  }
  SourceMap src;
  if (root.IsDefined() && !root.IsNull()) {
    if (!root.IsMap()) throw Error(Errc::ConfigError, file + ":1: top level must be a mapping");
    std::map<std::string, FieldRef> reg;
    for (auto& [k, f] : fields(cfg)) reg.emplace(k, f);
    detail::walk(root, "", file, reg, src);
  }
  if (sources) *sources = std::move(src);
  return cfg;
}

inline CampaignConfig load_file(const std::string& path, SourceMap* sources = nullptr) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), Errc::IoError, "cannot read config '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return from_yaml(ss.str(), path, sources);
}

/// Override one key from "key=value" text (value in YAML syntax).
inline void set_value(CampaignConfig& cfg, const std::string& key, const std::string& value,
                      const std::string& origin, SourceMap* sources = nullptr) {
  for (auto& [k, f] : fields(cfg)) {
    if (k != key) continue;
    YAML::Node node;
    try {
      node = YAML::Load(value);
    } catch (const YAML::Exception&) {
      throw Error(Errc::ConfigError, origin + ": cannot parse value for " + key);
    }
    detail::set_leaf(f, node, origin, key);
    if (sources) (*sources)[key] = origin;
    return;
  }
  throw Error(Errc::ConfigError, origin + ": unknown key '" + key + "'");
}

inline double tau_dm(const CampaignConfig& cfg) { return dm::coherence_time(cfg.point, cfg.halo); }

/// Domain checks; messages carry the line or flag that set the offending key.
inline void validate(const CampaignConfig& cfg, const SourceMap& src = {}) {
  const auto check = [&](bool ok, const std::string& key, const std::string& msg) {
    if (!ok) throw Error(Errc::ConfigError, detail::anchor(src, key) + key + " " + msg);
  };
  const auto positive_list = [&](const std::vector<double>& v, const std::string& key, bool allow_zero) {
    check(!v.empty(), key, "must not be empty");
    for (double x : v) check(std::isfinite(x) && (allow_zero ? x >= 0.0 : x > 0.0), key,
                             allow_zero ? "entries must be >= 0" : "entries must be > 0");
  };
  check(cfg.workers >= 1, "workers", "must be >= 1");
  check(cfg.repeats >= 1, "repeats", "must be >= 1");
  try {
    cfg.device.validate();
  } catch (const Error& e) {
    throw Error(Errc::ConfigError, detail::anchor(src, "device") + e.what());
  }
  try {
    cfg.halo.validate();
  } catch (const Error& e) {
    throw Error(Errc::ConfigError, detail::anchor(src, "halo") + e.what());
  }
  try {
    cfg.point.validate();
  } catch (const Error& e) {
    throw Error(Errc::ConfigError, detail::anchor(src, "point") + e.what());
  }
  check(cfg.thresholds.compass > 0.0, "thresholds.compass", "must be > 0");
  check(cfg.thresholds.vacuum > 0.0, "thresholds.vacuum", "must be > 0");
  check(cfg.calibration.trials >= 1, "calibration.trials", "must be >= 1");
  positive_list(cfg.calibration.alpha_sq, "calibration.alpha_sq", false);
  positive_list(cfg.calibration.n_inj_compass, "calibration.n_inj_compass", true);
  positive_list(cfg.calibration.n_inj_vacuum, "calibration.n_inj_vacuum", true);
  check(cfg.search.trials >= 1, "search.trials", "must be >= 1");
  check(!cfg.search.alpha_sq.empty() || cfg.search.vacuum, "search.alpha_sq", "and search.vacuum select no probe");
  if (!cfg.search.alpha_sq.empty()) positive_list(cfg.search.alpha_sq, "search.alpha_sq", false);
  positive_list(cfg.search.tau, "search.tau", false);
  check(cfg.search.tau_max >= 0.0, "search.tau_max", "must be >= 0");
  check(cfg.search.epsilon_inj >= 0.0, "search.epsilon_inj", "must be >= 0");
  check(cfg.search.offres_span_hz > 0.0, "search.offres_span_hz", "must be > 0");
  check(cfg.search.offres_points >= 2, "search.offres_points", "must be >= 2");
  check(cfg.scan.bins >= 2, "scan.bins", "must be >= 2");
  check(cfg.scan.spacing_hz > 0.0, "scan.spacing_hz", "must be > 0");
  check(cfg.scan.trials >= 1, "scan.trials", "must be >= 1");
  check(cfg.scan.inject_bin >= -1 && cfg.scan.inject_bin < cfg.scan.bins, "scan.inject_bin",
        "must be -1 or a bin index");
  check(cfg.scan.epsilon_inj >= 0.0, "scan.epsilon_inj", "must be >= 0");
  check(cfg.scan.t1c.empty() || static_cast<int>(cfg.scan.t1c.size()) == cfg.scan.bins, "scan.t1c",
        "needs one entry per bin");
  if (!cfg.scan.t1c.empty()) positive_list(cfg.scan.t1c, "scan.t1c", false);
}

}  // namespace catscope::config
