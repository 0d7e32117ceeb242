#pragma once

#include <charconv>
#include <cstdio>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "bnadapt/bench/config.hpp"
#include "bnadapt/metatrain.hpp"

namespace bnadapt::bench {

// One line of an evaluation CSV. Aggregate lines carry domain_id "mean" or
// "std"; seed = nullopt marks aggregation across seeds ("all").
struct EvalRow {
  std::string method;
  Alpha alpha;
  std::size_t L = 0;
  std::size_t C = 0;
  Granularity granularity = Granularity::plate;
  std::optional<std::uint64_t> seed;
  std::string domain_id;
  double accuracy = 0.0;

  bool operator==(const EvalRow&) const = default;
};

struct EvalTable {
  std::vector<EvalRow> rows;
  bool operator==(const EvalTable&) const = default;
};

inline constexpr const char* kEvalCsvHeader = "method,alpha,L,C,granularity,seed,domain_id,accuracy";

inline std::string format_exact(double v) {
  char buf[40];
  // shortest form that parses back to the same double
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

inline std::string to_csv(const EvalTable& t) {
  std::string out = std::string(kEvalCsvHeader) + "\n";
  for (const auto& r : t.rows) {
    out += r.method + "," + format_alpha(r.alpha) + "," + std::to_string(r.L) + "," + std::to_string(r.C) + "," +
           to_string(r.granularity) + "," + (r.seed ? std::to_string(*r.seed) : std::string("all")) + "," +
           r.domain_id + "," + format_exact(r.accuracy) + "\n";
  }
  return out;
}

inline EvalTable parse_eval_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kEvalCsvHeader) throw IoError("eval CSV: bad header");
  EvalTable t;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    if (f.size() != 8) throw IoError("eval CSV line " + std::to_string(lineno) + ": expected 8 fields");
    EvalRow r;
    try {
      r.method = f[0];
      r.alpha = parse_alpha(f[1]);
      r.L = std::stoull(f[2]);
      r.C = std::stoull(f[3]);
      r.granularity = parse_granularity(f[4]);
      if (f[5] != "all") r.seed = std::stoull(f[5]);
      r.domain_id = f[6];
      r.accuracy = std::stod(f[7]);
    } catch (const std::logic_error&) {
      throw IoError("eval CSV line " + std::to_string(lineno) + ": bad field");
    }
    t.rows.push_back(std::move(r));
  }
  return t;
}

// Appends one evaluation's per-batch rows followed by its mean/std rows.
inline void append_report(EvalTable& t, const EvalReport& rep, const Alpha& alpha, std::size_t L, std::size_t C,
                          std::uint64_t seed) {
  EvalRow base{rep.method, alpha, L, C, rep.granularity, seed, "", 0.0};
  for (const auto& rec : rep.records) {
    EvalRow r = base;
    r.domain_id = rec.domain_id;
    r.accuracy = rec.accuracy;
    t.rows.push_back(r);
  }
  EvalRow m = base;
  m.domain_id = "mean";
  m.accuracy = rep.mean;
  t.rows.push_back(m);
  m.domain_id = "std";
  m.accuracy = rep.std;
  t.rows.push_back(m);
}

// Adds seed="all" mean/std rows over the per-seed means of every
// (method, alpha, L, C, granularity) group, in first-seen order.
inline void append_seed_aggregates(EvalTable& t) {
  using Key = std::tuple<std::string, std::string, std::size_t, std::size_t, std::string>;
  std::vector<Key> order;
  std::map<Key, std::vector<double>> means;
  std::map<Key, EvalRow> proto;
  for (const auto& r : t.rows) {
    if (!r.seed || r.domain_id != "mean") continue;
    const Key k{r.method, format_alpha(r.alpha), r.L, r.C, to_string(r.granularity)};
    if (!means.count(k)) {
      order.push_back(k);
      proto[k] = r;
    }
    means[k].push_back(r.accuracy);
  }
  for (const auto& k : order) {
    const auto [m, s] = mean_std(means[k]);
    EvalRow r = proto[k];
    r.seed.reset();
    r.domain_id = "mean";
    r.accuracy = m;
    t.rows.push_back(r);
    r.domain_id = "std";
    r.accuracy = s;
    t.rows.push_back(r);
  }
}

// Seed-aggregated mean/std for one group; throws if absent.
inline std::pair<double, double> lookup(const EvalTable& t, const std::string& method, const Alpha& alpha,
                                        std::size_t L, std::size_t C, Granularity g) {
  std::optional<double> m, s;
  for (const auto& r : t.rows) {
    if (r.seed || r.method != method || r.alpha != alpha || r.L != L || r.C != C || r.granularity != g) continue;
    if (r.domain_id == "mean") m = r.accuracy;
    if (r.domain_id == "std") s = r.accuracy;
  }
  if (!m || !s) throw Error("no aggregate for " + method + " alpha=" + format_alpha(alpha) + " L=" + std::to_string(L));
  return {*m, *s};
}

}  // namespace bnadapt::bench
