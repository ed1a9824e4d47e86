#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace c2f {

struct EvalBatch {
  std::size_t samples = 0;
  std::size_t classes = 0;
  std::vector<double> scores;         // N x C, row-major
  std::vector<std::uint8_t> labels;   // N x C, row-major
  std::vector<std::size_t> ks{3, 5};

  double score(std::size_t n, std::size_t c) const { return scores[n * classes + c]; }
  bool label(std::size_t n, std::size_t c) const { return labels[n * classes + c] != 0; }
};

struct MetricRow {
  std::string name;
  std::size_t k = 0;  // 0 for metrics without a cutoff
  double value = 0.0;
};

struct MetricsReport {
  std::vector<MetricRow> rows;
  std::size_t samples = 0;
  std::size_t excluded_rows = 0;  // rows without any positive label

  std::optional<double> find(const std::string& name, std::size_t k = 0) const {
    for (const auto& r : rows)
      if (r.name == name && r.k == k) return r.value;
    return std::nullopt;
  }

  double get(const std::string& name, std::size_t k = 0) const {
    if (auto v = find(name, k)) return *v;
    throw std::out_of_range("metric " + name + (k ? "@" + std::to_string(k) : "") + " not in report");
  }

  std::string text() const {
    std::string out;
    char buf[128];
    for (const auto& r : rows) {
      const std::string key = r.k ? r.name + "@" + std::to_string(r.k) : r.name;
      std::snprintf(buf, sizeof buf, "%-14s %.4f\n", (key + ":").c_str(), r.value);
      out += buf;
    }
    std::snprintf(buf, sizeof buf, "%-14s %zu\n%-14s %zu\n", "samples:", samples, "excluded:", excluded_rows);
    out += buf;
    return out;
  }

  std::string csv() const {
    std::string out = "metric,k,value\n";
    char buf[128];
    for (const auto& r : rows) {
      std::snprintf(buf, sizeof buf, "%s,%s,%.4f\n", r.name.c_str(), r.k ? std::to_string(r.k).c_str() : "", r.value);
      out += buf;
    }
    return out;
  }
};

/// Class indices by descending score; ties to the lower index.
inline std::vector<std::size_t> rank_classes(const EvalBatch& b, std::size_t n) {
  std::vector<std::size_t> order(b.classes);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return b.score(n, x) > b.score(n, y); });
  return order;
}

/// Average precision of one ranking; `relevant` is in ranked order.
inline double average_precision(const std::vector<bool>& relevant) {
  double hits = 0.0, total = 0.0;
  for (std::size_t i = 0; i < relevant.size(); ++i)
    if (relevant[i]) {
      hits += 1.0;
      total += hits / static_cast<double>(i + 1);
    }
  return hits > 0.0 ? total / hits : 0.0;
}

/// Multi-label metric suite. @k metrics binarize each row by its top-k classes.
/// Rows without positives are excluded from every per-sample average (rank
/// loss additionally skips rows without negatives); mAP ranks every row.
inline MetricsReport evaluate(const EvalBatch& b) {
  if (b.samples == 0 || b.classes == 0) throw std::invalid_argument("evaluate: empty batch");
  if (b.scores.size() != b.samples * b.classes || b.labels.size() != b.samples * b.classes)
    throw std::invalid_argument("evaluate: scores and labels must both be N x C");
  for (std::size_t k : b.ks)
    if (k == 0) throw std::invalid_argument("evaluate: k must be positive");

  struct Acc {
    double p = 0, r = 0, f = 0, h = 0, a = 0;
  };
  std::vector<Acc> at_k(b.ks.size());
  double one_error = 0, coverage = 0, rank_loss = 0;
  std::size_t used = 0, rank_rows = 0;
  MetricsReport report;
  report.samples = b.samples;

  for (std::size_t n = 0; n < b.samples; ++n) {
    std::size_t npos = 0;
    for (std::size_t c = 0; c < b.classes; ++c) npos += b.label(n, c);
    if (npos == 0) {
      ++report.excluded_rows;
      continue;
    }
    ++used;
    const std::vector<std::size_t> order = rank_classes(b, n);
    for (std::size_t ki = 0; ki < b.ks.size(); ++ki) {
      const std::size_t k = std::min(b.ks[ki], b.classes);
      std::size_t hit = 0;
      for (std::size_t i = 0; i < k; ++i) hit += b.label(n, order[i]);
      const double p = static_cast<double>(hit) / static_cast<double>(b.ks[ki]);
      const double r = static_cast<double>(hit) / static_cast<double>(npos);
      at_k[ki].p += p;
      at_k[ki].r += r;
      at_k[ki].f += (p + r) > 0 ? 2 * p * r / (p + r) : 0.0;
      at_k[ki].h += static_cast<double>((k - hit) + (npos - hit)) / static_cast<double>(b.classes);
      at_k[ki].a += static_cast<double>(hit) / static_cast<double>(k + npos - hit);
    }
    one_error += b.label(n, order[0]) ? 0.0 : 1.0;
    std::size_t worst = 0;
    for (std::size_t i = 0; i < order.size(); ++i)
      if (b.label(n, order[i])) worst = i;
    coverage += static_cast<double>(worst);
    const std::size_t nneg = b.classes - npos;
    if (nneg > 0) {
      double wrong = 0;
      for (std::size_t i = 0; i < b.classes; ++i) {
        if (!b.label(n, i)) continue;
        for (std::size_t j = 0; j < b.classes; ++j) {
          if (b.label(n, j)) continue;
          if (b.score(n, i) < b.score(n, j)) wrong += 1.0;
          else if (b.score(n, i) == b.score(n, j)) wrong += 0.5;
        }
      }
      rank_loss += wrong / static_cast<double>(npos * nneg);
      ++rank_rows;
    }
  }

  const double u = used ? static_cast<double>(used) : 1.0;
  for (std::size_t ki = 0; ki < b.ks.size(); ++ki) {
    const std::size_t k = b.ks[ki];
    report.rows.push_back({"precision", k, at_k[ki].p / u});
    report.rows.push_back({"recall", k, at_k[ki].r / u});
    report.rows.push_back({"f1", k, at_k[ki].f / u});
    report.rows.push_back({"hamming", k, at_k[ki].h / u});
    report.rows.push_back({"accuracy", k, at_k[ki].a / u});
  }
  report.rows.push_back({"one_error", 0, one_error / u});
  report.rows.push_back({"coverage", 0, coverage / u});
  report.rows.push_back({"rank_loss", 0, rank_rows ? rank_loss / static_cast<double>(rank_rows) : 0.0});

  double ap_sum = 0;
  std::size_t ap_classes = 0;
  std::vector<std::size_t> order(b.samples);
  for (std::size_t c = 0; c < b.classes; ++c) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t x, std::size_t y) { return b.score(x, c) > b.score(y, c); });
    std::vector<bool> rel(b.samples);
    bool any = false;
    for (std::size_t i = 0; i < b.samples; ++i) any |= (rel[i] = b.label(order[i], c));
    if (!any) continue;
    ap_sum += average_precision(rel);
    ++ap_classes;
  }
  report.rows.push_back({"mAP", 0, ap_classes ? ap_sum / static_cast<double>(ap_classes) : 0.0});
  return report;
}

}  // namespace c2f
