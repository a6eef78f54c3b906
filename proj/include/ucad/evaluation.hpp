// Copyright 2026 The ucad Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <numeric>
#include <optional>
#include <vector>

#include "ucad/error.hpp"

namespace ucad {

/// Inputs of the deployment-efficiency ratio. Memory values may use any unit
/// as long as it is the same for every field.
struct DearInputs {
  std::vector<double> acc_m;         // accuracy of the evaluated system, per task
  std::vector<double> acc_baseline;  // accuracy of per-task fine-tuned baselines
  std::vector<double> mem_m;         // system memory while serving each task
  double mem_baseline_single = 0.0;  // memory of one baseline model
  double k = 3.0;
};

/// DEAR = (sum acc_m / sum acc_baseline)^k / (sum mem_m / (N * mem_baseline)).
inline double dear(const DearInputs& in) {
  const std::size_t n = in.acc_m.size();
  require(n >= 1, ErrorKind::kDomain, "dear: need at least one task");
  require(in.acc_baseline.size() == n && in.mem_m.size() == n, ErrorKind::kDomain,
          "dear: per-task vectors differ in length");
  for (std::size_t i = 0; i < n; ++i) {
    require(in.acc_m[i] >= 0.0 && in.acc_m[i] <= 1.0 && in.acc_baseline[i] >= 0.0 &&
                in.acc_baseline[i] <= 1.0,
            ErrorKind::kDomain, "dear: accuracies must lie in [0, 1]");
    require(in.mem_m[i] > 0.0, ErrorKind::kDomain, "dear: memory must be positive");
  }
  require(in.mem_baseline_single > 0.0, ErrorKind::kDomain, "dear: baseline memory must be positive");
  const double acc_sum = std::accumulate(in.acc_m.begin(), in.acc_m.end(), 0.0);
  const double base_sum = std::accumulate(in.acc_baseline.begin(), in.acc_baseline.end(), 0.0);
  require(base_sum > 0.0, ErrorKind::kDomain, "dear: baseline accuracy sum is zero");
  const double mem_sum = std::accumulate(in.mem_m.begin(), in.mem_m.end(), 0.0);
  const double efficacy = std::pow(acc_sum / base_sum, in.k);
  const double allocation = mem_sum / (static_cast<double>(n) * in.mem_baseline_single);
  return efficacy / allocation;
}

/// Reads a `task_id,acc_m,acc_baseline,mem_m` table (header row required).
inline DearInputs read_dear_csv(const std::filesystem::path& path, double mem_baseline_single,
                                double k = 3.0) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorKind::kIo, "cannot open " + path.string());
  DearInputs out;
  out.mem_baseline_single = mem_baseline_single;
  out.k = k;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line_no == 1) {
      require(line == "task_id,acc_m,acc_baseline,mem_m", ErrorKind::kInput,
              path.string() + ": unexpected header '" + line + "'");
      continue;
    }
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    require(f.size() == 4, ErrorKind::kInput,
            path.string() + ":" + std::to_string(line_no) + ": expected 4 fields");
    try {
      out.acc_m.push_back(std::stod(f[1]));
      out.acc_baseline.push_back(std::stod(f[2]));
      out.mem_m.push_back(std::stod(f[3]));
    } catch (const std::exception&) {
      throw Error(ErrorKind::kInput, path.string() + ":" + std::to_string(line_no) + ": bad number");
    }
  }
  return out;
}

inline double accuracy(const std::vector<std::size_t>& preds, const std::vector<std::size_t>& labels) {
  require(preds.size() == labels.size() && !preds.empty(), ErrorKind::kDomain,
          "accuracy: prediction/label count mismatch or empty");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) hit += preds[i] == labels[i];
  return static_cast<double>(hit) / static_cast<double>(preds.size());
}

// Mean of per-class F1 over all K classes; a class with no support and no
// predictions contributes 0.
inline double macro_f1(const std::vector<std::size_t>& preds, const std::vector<std::size_t>& labels,
                       std::size_t num_classes) {
  require(preds.size() == labels.size() && num_classes > 0, ErrorKind::kDomain,
          "macro_f1: prediction/label count mismatch");
  std::vector<std::size_t> tp(num_classes, 0), fp(num_classes, 0), fn(num_classes, 0);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    require(preds[i] < num_classes && labels[i] < num_classes, ErrorKind::kDomain,
            "macro_f1: class index out of range");
    if (preds[i] == labels[i]) {
      ++tp[preds[i]];
    } else {
      ++fp[preds[i]];
      ++fn[labels[i]];
    }
  }
  double sum = 0.0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    const double denom = 2.0 * tp[c] + fp[c] + fn[c];
    sum += denom > 0 ? 2.0 * tp[c] / denom : 0.0;
  }
  return sum / static_cast<double>(num_classes);
}

/// Rank-based (Mann-Whitney) ROC AUC with midranks for ties. Empty when the
/// labels lack either class.
inline std::optional<double> auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  require(scores.size() == labels.size(), ErrorKind::kDomain, "auc: score/label count mismatch");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  std::vector<double> rank(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double mid = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
    for (std::size_t t = i; t <= j; ++t) rank[order[t]] = mid;
    i = j + 1;
  }
  double pos = 0, rank_sum = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i]) {
      ++pos;
      rank_sum += rank[i];
    }
  }
  const double neg = static_cast<double>(n) - pos;
  if (pos == 0 || neg == 0) return std::nullopt;
  return (rank_sum - pos * (pos + 1) / 2.0) / (pos * neg);
}

struct PerLabelAuc {
  std::vector<std::optional<double>> per_label;
  std::optional<double> mean;  // over labels where AUC is defined
};

// scores[i][k], labels[i][k] for sample i, label k.
inline PerLabelAuc per_label_auc(const std::vector<std::vector<double>>& scores,
                                 const std::vector<std::vector<int>>& labels) {
  require(scores.size() == labels.size() && !scores.empty(), ErrorKind::kDomain,
          "per_label_auc: sample count mismatch or empty");
  const std::size_t k = scores.front().size();
  PerLabelAuc out;
  double sum = 0;
  std::size_t defined = 0;
  for (std::size_t c = 0; c < k; ++c) {
    std::vector<double> col;
    std::vector<int> lab;
    for (std::size_t i = 0; i < scores.size(); ++i) {
      require(scores[i].size() == k && labels[i].size() == k, ErrorKind::kDomain,
              "per_label_auc: ragged matrix");
      col.push_back(scores[i][c]);
      lab.push_back(labels[i][c]);
    }
    out.per_label.push_back(auc(col, lab));
    if (out.per_label.back()) {
      sum += *out.per_label.back();
      ++defined;
    }
  }
  if (defined) out.mean = sum / static_cast<double>(defined);
  return out;
}

}  // namespace ucad
