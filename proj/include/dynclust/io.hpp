#pragma once

#include <algorithm>
#include <cctype>
#include <cerrno>
#include <charconv>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dynclust/dlm.hpp"
#include "dynclust/errors.hpp"
#include "dynclust/panel.hpp"

namespace dynclust {

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t b = 0;
  std::size_t e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::stringstream ss(line);
  while (std::getline(ss, cell, ',')) cells.push_back(trim(cell));
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

inline bool parse_double(const std::string& s, double& out) {
  if (s.empty()) return false;
  const char* begin = s.data();
  const char* end = begin + s.size();
  // std::from_chars round-trips every finite double, subnormals included
  // (std::stod raises out_of_range on them).
  const auto [ptr, ec] = std::from_chars(begin, end, out);
  if (ec == std::errc() && ptr == end) return true;
  // from_chars rejects leading '+' and named specials; fall back to strtod
  // for those spellings so inputs like "+1.5" or "nan" parse (the caller
  // decides whether non-finite values are acceptable).
  char* tail = nullptr;
  errno = 0;
  const double v = std::strtod(s.c_str(), &tail);
  if (tail != s.c_str() + s.size() || errno == ERANGE) return false;
  out = v;
  return true;
}

inline bool parse_int(const std::string& s, long long& out) {
  if (s.empty()) return false;
  std::size_t pos = 0;
  try {
    out = std::stoll(s, &pos);
  } catch (...) {
    return false;
  }
  return pos == s.size();
}

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace detail

// Long-format panel reader: series_id, time_index (1..T), then one column
// per observation dimension. The grid must be complete with every pair
// present exactly once; series are ordered lexicographically by id.
inline TimeSeriesPanel load_panel(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw DataError("panel file is empty");
  const auto header = detail::split_csv_line(line);
  if (header.size() < 3) {
    throw DataError("panel header needs series_id, time_index and at least one value column");
  }
  const int m = static_cast<int>(header.size()) - 2;

  struct Cell {
    long long t;
    Eigen::VectorXd values;
  };
  std::map<std::string, std::vector<Cell>> rows;
  long long t_max = 0;
  int row_number = 1;
  while (std::getline(in, line)) {
    ++row_number;
    if (detail::trim(line).empty()) continue;
    const auto cells = detail::split_csv_line(line);
    if (static_cast<int>(cells.size()) != m + 2) {
      throw DataError("row " + std::to_string(row_number) + " has " +
                      std::to_string(cells.size()) + " cells, expected " + std::to_string(m + 2));
    }
    long long t = 0;
    if (!detail::parse_int(cells[1], t) || t < 1) {
      throw DataError("row " + std::to_string(row_number) + " has invalid time_index '" +
                      cells[1] + "'");
    }
    Eigen::VectorXd values(m);
    for (int l = 0; l < m; ++l) {
      double v = 0.0;
      if (!detail::parse_double(cells[static_cast<std::size_t>(l + 2)], v)) {
        throw DataError("row " + std::to_string(row_number) + " has non-numeric value '" +
                        cells[static_cast<std::size_t>(l + 2)] + "'");
      }
      if (!std::isfinite(v)) {
        throw DataError("row " + std::to_string(row_number) + " holds a non-finite value");
      }
      values[l] = v;
    }
    t_max = std::max(t_max, t);
    rows[cells[0]].push_back(Cell{t, std::move(values)});
  }
  if (rows.empty()) throw DataError("panel file holds no data rows");
  if (t_max > 100000000) throw DataError("panel time indices are implausibly large");
  const int T = static_cast<int>(t_max);

  TimeSeriesPanel panel;
  for (std::size_t l = 2; l < header.size(); ++l) panel.value_names.push_back(header[l]);
  for (auto& [id, cells] : rows) {
    Eigen::MatrixXd series(T, m);
    std::vector<bool> seen(static_cast<std::size_t>(T), false);
    for (const auto& cell : cells) {
      if (cell.t > T) throw DataError("internal time bound error");
      const int t = static_cast<int>(cell.t) - 1;
      if (seen[static_cast<std::size_t>(t)]) {
        throw DataError("duplicate entry for (" + id + ", " + std::to_string(cell.t) + ")");
      }
      seen[static_cast<std::size_t>(t)] = true;
      series.row(t) = cell.values.transpose();
    }
    for (int t = 0; t < T; ++t) {
      if (!seen[static_cast<std::size_t>(t)]) {
        throw DataError("missing entry for (" + id + ", " + std::to_string(t + 1) + ")");
      }
    }
    panel.ids.push_back(id);
    panel.series.push_back(std::move(series));
  }
  panel.validate();
  return panel;
}

inline TimeSeriesPanel load_panel(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open panel file '" + path + "'");
  try {
    return load_panel(in);
  } catch (const DataError& e) {
    throw DataError(path + ": " + e.what());
  }
}

inline void save_panel(const TimeSeriesPanel& panel, std::ostream& out) {
  panel.validate();
  out << "series_id,time_index";
  for (int l = 0; l < panel.m(); ++l) {
    out << ',' << (panel.value_names.empty() ? "y" + std::to_string(l + 1)
                                             : panel.value_names[static_cast<std::size_t>(l)]);
  }
  out << '\n';
  for (int i = 0; i < panel.n(); ++i) {
    for (int t = 0; t < panel.T(); ++t) {
      out << panel.ids[static_cast<std::size_t>(i)] << ',' << (t + 1);
      for (int l = 0; l < panel.m(); ++l) {
        out << ',' << detail::format_double(panel.series[static_cast<std::size_t>(i)](t, l));
      }
      out << '\n';
    }
  }
}

inline void save_panel(const TimeSeriesPanel& panel, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  save_panel(panel, out);
  if (!out) throw DataError("failed writing '" + path + "'");
}

enum class Algorithm { StaticGibbs, StaticEm, DynamicGibbs, DynamicSem, Independent };
enum class DeltaMode { Fixed, Heuristic, Estimate };

inline std::string to_string(Algorithm a) {
  switch (a) {
    case Algorithm::StaticGibbs: return "static_gibbs";
    case Algorithm::StaticEm: return "static_em";
    case Algorithm::DynamicGibbs: return "dynamic_gibbs";
    case Algorithm::DynamicSem: return "dynamic_sem";
    case Algorithm::Independent: return "independent";
  }
  return "unknown";
}

inline std::string to_string(DeltaMode m) {
  switch (m) {
    case DeltaMode::Fixed: return "fixed";
    case DeltaMode::Heuristic: return "heuristic";
    case DeltaMode::Estimate: return "estimate";
  }
  return "unknown";
}

inline bool is_dynamic(Algorithm a) {
  return a == Algorithm::DynamicGibbs || a == Algorithm::DynamicSem ||
         a == Algorithm::Independent;
}

struct ClusterConfig {
  std::vector<StructuralFamily> families;
  double discount = 0.9;
};

// Flat key = value run configuration with one [cluster] block per cluster
// (a single block is reused for every cluster). The exact grammar is
// documented in the README.
struct RunConfig {
  Algorithm algorithm = Algorithm::StaticEm;
  int k = 0;
  std::uint64_t seed = 0;
  int iterations = 2000;
  int burn_in = 500;
  int thin = 1;
  double tol = 1e-6;
  int max_iter = 500;
  int mc_size = 10;
  DeltaMode delta_mode = DeltaMode::Heuristic;
  std::vector<double> delta_values;
  std::vector<double> dirichlet_prior{1.0};
  double eps_w = kDefaultWeightEpsilon;
  int relabel_time = 0;   // 1-based; 0 requests the automatic choice
  int relabel_coord = 1;  // 1-based observation coordinate
  int sir_proposals = 200;
  std::vector<ClusterConfig> clusters;

  bool has_algorithm = false;
  bool has_k = false;
  bool has_seed = false;
};

namespace detail {

inline Algorithm parse_algorithm(const std::string& v, int line) {
  if (v == "static_gibbs") return Algorithm::StaticGibbs;
  if (v == "static_em") return Algorithm::StaticEm;
  if (v == "dynamic_gibbs") return Algorithm::DynamicGibbs;
  if (v == "dynamic_sem") return Algorithm::DynamicSem;
  if (v == "independent") return Algorithm::Independent;
  throw ConfigError("line " + std::to_string(line) + ": unknown algorithm '" + v + "'");
}

inline DeltaMode parse_delta_mode(const std::string& v, int line) {
  if (v == "fixed") return DeltaMode::Fixed;
  if (v == "heuristic") return DeltaMode::Heuristic;
  if (v == "estimate") return DeltaMode::Estimate;
  throw ConfigError("line " + std::to_string(line) + ": unknown delta_mode '" + v + "'");
}

inline StructuralFamily parse_family(const std::string& v, int line) {
  if (v == "random_walk") return StructuralFamily::RandomWalk;
  if (v == "local_linear") return StructuralFamily::LocalLinear;
  throw ConfigError("line " + std::to_string(line) + ": unknown structural family '" + v + "'");
}

inline std::vector<std::string> split_tokens(const std::string& s) {
  std::vector<std::string> tokens;
  std::stringstream ss(s);
  std::string tok;
  while (ss >> tok) tokens.push_back(tok);
  return tokens;
}

inline double config_double(const std::string& v, const std::string& key, int line) {
  double out = 0.0;
  if (!parse_double(v, out)) {
    throw ConfigError("line " + std::to_string(line) + ": '" + key + "' needs a number, got '" +
                      v + "'");
  }
  return out;
}

inline long long config_int(const std::string& v, const std::string& key, int line) {
  long long out = 0;
  if (!parse_int(v, out)) {
    throw ConfigError("line " + std::to_string(line) + ": '" + key + "' needs an integer, got '" +
                      v + "'");
  }
  return out;
}

}  // namespace detail

inline RunConfig parse_config(std::istream& in) {
  RunConfig cfg;
  std::string line;
  int line_number = 0;
  bool in_cluster = false;
  while (std::getline(in, line)) {
    ++line_number;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    if (line == "[cluster]") {
      cfg.clusters.emplace_back();
      in_cluster = true;
      continue;
    }
    if (line.front() == '[') {
      throw ConfigError("line " + std::to_string(line_number) + ": unknown section '" + line +
                        "'");
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(line_number) + ": expected 'key = value'");
    }
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    if (value.empty()) {
      throw ConfigError("line " + std::to_string(line_number) + ": '" + key + "' has no value");
    }

    if (in_cluster) {
      auto& cluster = cfg.clusters.back();
      if (key == "family") {
        cluster.families.clear();
        for (const auto& tok : detail::split_tokens(value)) {
          cluster.families.push_back(detail::parse_family(tok, line_number));
        }
      } else if (key == "discount") {
        cluster.discount = detail::config_double(value, key, line_number);
      } else {
        throw ConfigError("line " + std::to_string(line_number) + ": unknown cluster key '" +
                          key + "'");
      }
      continue;
    }

    if (key == "algorithm") {
      cfg.algorithm = detail::parse_algorithm(value, line_number);
      cfg.has_algorithm = true;
    } else if (key == "k") {
      cfg.k = static_cast<int>(detail::config_int(value, key, line_number));
      cfg.has_k = true;
    } else if (key == "seed") {
      const long long s = detail::config_int(value, key, line_number);
      if (s < 0) throw ConfigError("line " + std::to_string(line_number) + ": seed must be >= 0");
      cfg.seed = static_cast<std::uint64_t>(s);
      cfg.has_seed = true;
    } else if (key == "iterations") {
      cfg.iterations = static_cast<int>(detail::config_int(value, key, line_number));
    } else if (key == "burn_in") {
      cfg.burn_in = static_cast<int>(detail::config_int(value, key, line_number));
    } else if (key == "thin") {
      cfg.thin = static_cast<int>(detail::config_int(value, key, line_number));
    } else if (key == "tol") {
      cfg.tol = detail::config_double(value, key, line_number);
    } else if (key == "max_iter") {
      cfg.max_iter = static_cast<int>(detail::config_int(value, key, line_number));
    } else if (key == "mc_size") {
      cfg.mc_size = static_cast<int>(detail::config_int(value, key, line_number));
    } else if (key == "delta_mode") {
      cfg.delta_mode = detail::parse_delta_mode(value, line_number);
    } else if (key == "delta_values") {
      cfg.delta_values.clear();
      for (const auto& tok : detail::split_tokens(value)) {
        cfg.delta_values.push_back(detail::config_double(tok, key, line_number));
      }
    } else if (key == "dirichlet_prior") {
      cfg.dirichlet_prior.clear();
      for (const auto& tok : detail::split_tokens(value)) {
        cfg.dirichlet_prior.push_back(detail::config_double(tok, key, line_number));
      }
    } else if (key == "epsilon_weight") {
      cfg.eps_w = detail::config_double(value, key, line_number);
    } else if (key == "relabel_time") {
      cfg.relabel_time = static_cast<int>(detail::config_int(value, key, line_number));
    } else if (key == "relabel_coord") {
      cfg.relabel_coord = static_cast<int>(detail::config_int(value, key, line_number));
    } else if (key == "sir_proposals") {
      cfg.sir_proposals = static_cast<int>(detail::config_int(value, key, line_number));
    } else {
      throw ConfigError("line " + std::to_string(line_number) + ": unknown key '" + key + "'");
    }
  }
  return cfg;
}

inline RunConfig parse_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  try {
    return parse_config(in);
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

// Expands broadcasts and validates every field against the panel. The
// returned config always has k cluster blocks, m-sized family lists, n
// delta values (fixed mode) and a k-sized Dirichlet prior.
inline RunConfig resolve_config(RunConfig cfg, const TimeSeriesPanel& panel) {
  panel.validate();
  if (!cfg.has_algorithm) throw ConfigError("config is missing 'algorithm'");
  if (!cfg.has_k) throw ConfigError("config is missing 'k'");
  if (!cfg.has_seed) throw ConfigError("config is missing 'seed' (runs must be reproducible)");
  if (cfg.k < 1) throw ConfigError("k must be at least 1");
  if (cfg.k > panel.n()) {
    throw ConfigError("k = " + std::to_string(cfg.k) + " exceeds the number of series (" +
                      std::to_string(panel.n()) + ")");
  }
  if (cfg.clusters.empty()) throw ConfigError("config needs at least one [cluster] block");
  if (static_cast<int>(cfg.clusters.size()) == 1 && cfg.k > 1) {
    cfg.clusters.resize(static_cast<std::size_t>(cfg.k), cfg.clusters.front());
  }
  if (static_cast<int>(cfg.clusters.size()) != cfg.k) {
    throw ConfigError("config has " + std::to_string(cfg.clusters.size()) +
                      " [cluster] blocks, expected 1 or k = " + std::to_string(cfg.k));
  }
  for (auto& cluster : cfg.clusters) {
    if (cluster.families.empty()) {
      cluster.families.assign(static_cast<std::size_t>(panel.m()), StructuralFamily::RandomWalk);
    }
    if (static_cast<int>(cluster.families.size()) == 1 && panel.m() > 1) {
      cluster.families.resize(static_cast<std::size_t>(panel.m()), cluster.families.front());
    }
    if (static_cast<int>(cluster.families.size()) != panel.m()) {
      throw ConfigError("cluster family list must have 1 or m = " + std::to_string(panel.m()) +
                        " entries");
    }
    if (!(cluster.discount > 0.0) || cluster.discount > 1.0) {
      throw ConfigError("cluster discount must lie in (0, 1]");
    }
  }

  if (cfg.algorithm == Algorithm::StaticGibbs || cfg.algorithm == Algorithm::DynamicGibbs) {
    if (cfg.burn_in < 0 || cfg.iterations <= cfg.burn_in) {
      throw ConfigError("gibbs runs need iterations > burn_in >= 0");
    }
    if (cfg.thin < 1) throw ConfigError("thin must be at least 1");
    if (cfg.sir_proposals < 100) throw ConfigError("sir_proposals must be at least 100");
  } else {
    if (!(cfg.tol > 0.0)) throw ConfigError("tol must be positive");
    if (cfg.max_iter < 1) throw ConfigError("max_iter must be at least 1");
  }
  if (cfg.algorithm == Algorithm::DynamicSem && cfg.mc_size < 1) {
    throw ConfigError("mc_size must be at least 1");
  }

  if (static_cast<int>(cfg.dirichlet_prior.size()) == 1 && cfg.k > 1) {
    cfg.dirichlet_prior.resize(static_cast<std::size_t>(cfg.k), cfg.dirichlet_prior.front());
  }
  if (static_cast<int>(cfg.dirichlet_prior.size()) != cfg.k) {
    throw ConfigError("dirichlet_prior needs 1 or k values");
  }
  for (double c : cfg.dirichlet_prior) {
    if (!(c > 0.0)) throw ConfigError("dirichlet_prior entries must be positive");
  }

  if (is_dynamic(cfg.algorithm) && cfg.algorithm != Algorithm::Independent) {
    if (cfg.delta_mode == DeltaMode::Fixed) {
      if (static_cast<int>(cfg.delta_values.size()) == 1 && panel.n() > 1) {
        cfg.delta_values.resize(static_cast<std::size_t>(panel.n()), cfg.delta_values.front());
      }
      if (static_cast<int>(cfg.delta_values.size()) != panel.n()) {
        throw ConfigError("delta_values needs 1 or n values in fixed mode");
      }
      for (double d : cfg.delta_values) {
        if (!(d > 0.0) || d > 1.0) throw ConfigError("delta values must lie in (0, 1]");
      }
    }
  }

  if (!(cfg.eps_w > 0.0)) throw ConfigError("epsilon_weight must be positive");
  if (cfg.relabel_time < 0 || cfg.relabel_time > panel.T()) {
    throw ConfigError("relabel_time must lie in 1..T");
  }
  if (cfg.relabel_coord < 1 || cfg.relabel_coord > panel.m()) {
    throw ConfigError("relabel_coord must lie in 1..m");
  }
  return cfg;
}

// Every config field, with its effective value, for the run manifest.
inline std::vector<std::pair<std::string, std::string>> manifest_entries(const RunConfig& cfg) {
  std::vector<std::pair<std::string, std::string>> out;
  auto add = [&](const std::string& key, const std::string& value) {
    out.emplace_back(key, value);
  };
  auto join = [](const std::vector<double>& values) {
    std::string s;
    for (std::size_t i = 0; i < values.size(); ++i) {
      if (i) s += ' ';
      s += detail::format_double(values[i]);
    }
    return s;
  };
  add("algorithm", to_string(cfg.algorithm));
  add("k", std::to_string(cfg.k));
  add("seed", std::to_string(cfg.seed));
  add("iterations", std::to_string(cfg.iterations));
  add("burn_in", std::to_string(cfg.burn_in));
  add("thin", std::to_string(cfg.thin));
  add("tol", detail::format_double(cfg.tol));
  add("max_iter", std::to_string(cfg.max_iter));
  add("mc_size", std::to_string(cfg.mc_size));
  add("delta_mode", to_string(cfg.delta_mode));
  add("delta_values", cfg.delta_values.empty() ? "none" : join(cfg.delta_values));
  add("dirichlet_prior", join(cfg.dirichlet_prior));
  add("epsilon_weight", detail::format_double(cfg.eps_w));
  add("relabel_time", cfg.relabel_time == 0 ? "auto" : std::to_string(cfg.relabel_time));
  add("relabel_coord", std::to_string(cfg.relabel_coord));
  add("sir_proposals", std::to_string(cfg.sir_proposals));
  for (std::size_t c = 0; c < cfg.clusters.size(); ++c) {
    std::string fam;
    for (std::size_t l = 0; l < cfg.clusters[c].families.size(); ++l) {
      if (l) fam += ' ';
      fam += cfg.clusters[c].families[l] == StructuralFamily::RandomWalk ? "random_walk"
                                                                         : "local_linear";
    }
    add("cluster" + std::to_string(c + 1) + ".family", fam);
    add("cluster" + std::to_string(c + 1) + ".discount",
        detail::format_double(cfg.clusters[c].discount));
  }
  return out;
}

// CLI exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.
inline int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return 2;
  if (dynamic_cast<const DataError*>(&e)) return 3;
  if (dynamic_cast<const Error*>(&e)) return 4;
  return 1;
}

}  // namespace dynclust
