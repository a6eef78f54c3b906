// Copyright 2026 The ucad Authors
// SPDX-License-Identifier: Apache-2.0
//
// Labelled tensor datasets: the manifest.csv reader/writer and the synthetic
// class-mean generator.

#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "ucad/numerics/uten.hpp"
#include "ucad/random.hpp"
#include "ucad/uel.hpp"

namespace ucad {

enum class Split { kTrain, kVal, kTest };

inline const char* to_string(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "?";
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "val") return Split::kVal;
  if (s == "test") return Split::kTest;
  fail(ErrorKind::kInput, "unknown split '" + s + "'");
}

struct ManifestEntry {
  Split split = Split::kTrain;
  std::string path;   // relative to the manifest directory
  std::string label;  // integer, or ';'-joined binary vector
};

struct DatasetManifest {
  std::filesystem::path root;
  std::vector<ManifestEntry> entries;
};

template <Scalar T>
struct Sample {
  Tensor<T> input;
  std::size_t label = 0;          // single-label target
  std::vector<int> label_vector;  // multi-label target
};

template <Scalar T>
struct Dataset {
  Modality modality = Modality::kTwoD;
  std::size_t num_classes = 0;
  bool multi_label = false;
  std::vector<Sample<T>> train, val, test;

  std::vector<Sample<T>>& split(Split s) {
    return s == Split::kTrain ? train : s == Split::kVal ? val : test;
  }
  const std::vector<Sample<T>>& split(Split s) const {
    return s == Split::kTrain ? train : s == Split::kVal ? val : test;
  }
};

inline std::vector<std::string> split_fields(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string field;
  std::istringstream is(line);
  while (std::getline(is, field, sep)) out.push_back(field);
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

inline std::string trim(std::string s) {
  const auto ws = " \t\r\n";
  s.erase(0, s.find_first_not_of(ws));
  s.erase(s.find_last_not_of(ws) + 1);
  return s;
}

// Columns split,path,label; a header row is optional.
inline DatasetManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::kIo, "cannot open manifest " + path.string());
  DatasetManifest m;
  m.root = path.parent_path();
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    auto f = split_fields(line, ',');
    if (f.size() != 3)
      fail(ErrorKind::kInput, path.string() + ":" + std::to_string(line_no) + ": expected 3 columns");
    if (line_no == 1 && trim(f[0]) == "split") continue;
    m.entries.push_back({parse_split(trim(f[0])), trim(f[1]), trim(f[2])});
  }
  return m;
}

inline void write_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorKind::kIo, "cannot write " + path.string());
  out << "split,path,label\n";
  for (const auto& e : m.entries) out << to_string(e.split) << ',' << e.path << ',' << e.label << '\n';
}

/// Loads every tensor a manifest references. A label containing ';' marks
/// the dataset as multi-label.
inline Dataset<float> load_dataset(const DatasetManifest& m) {
  require(!m.entries.empty(), ErrorKind::kInput, "manifest has no entries");
  Dataset<float> ds;
  ds.multi_label = m.entries.front().label.find(';') != std::string::npos;
  bool first = true;
  for (const auto& e : m.entries) {
    Sample<float> s;
    s.input = load_uten(m.root / e.path);
    const Modality mod = modality_of(s.input.shape());
    require(s.input.ndim() == 3 || s.input.ndim() == 4, ErrorKind::kInput,
            e.path + ": expected a 2D [H,W,C] or 3D [D,H,W,C] tensor");
    if (first) ds.modality = mod;
    require(mod == ds.modality, ErrorKind::kInput, e.path + ": mixed modalities in one dataset");
    if (ds.multi_label) {
      for (const auto& v : split_fields(e.label, ';')) {
        const std::string t = trim(v);
        require(t == "0" || t == "1", ErrorKind::kInput, e.path + ": multi-label entries must be 0 or 1");
        s.label_vector.push_back(t == "1");
      }
      if (first) ds.num_classes = s.label_vector.size();
      require(s.label_vector.size() == ds.num_classes, ErrorKind::kInput,
              e.path + ": label vector length differs");
    } else {
      require(e.label.find(';') == std::string::npos, ErrorKind::kInput,
              e.path + ": mixed single- and multi-label rows");
      try {
        s.label = std::stoul(e.label);
      } catch (const std::exception&) {
        fail(ErrorKind::kInput, e.path + ": bad label '" + e.label + "'");
      }
      ds.num_classes = std::max(ds.num_classes, s.label + 1);
    }
    first = false;
    ds.split(e.split).push_back(std::move(s));
  }
  if (!ds.multi_label) ds.num_classes = std::max<std::size_t>(ds.num_classes, 2);
  return ds;
}

inline Dataset<float> load_dataset(const std::filesystem::path& manifest_path) {
  return load_dataset(read_manifest(manifest_path));
}

struct SynthConfig {
  std::size_t classes = 2;
  Modality modality = Modality::kTwoD;
  Shape spatial = {16, 16};  // [H, W] or [D, H, W]
  std::size_t channels = 1;
  std::size_t train = 200;
  std::size_t val = 50;
  std::size_t test = 0;
  double noise = 0.1;
  std::uint64_t seed = 0;
};

// Class k has every voxel at mean -0.5 + k / (K - 1) (so +-0.5 for two
// classes) plus N(0, noise^2) noise. Labels cycle 0..K-1.
inline Dataset<float> make_synthetic_dataset(const SynthConfig& cfg) {
  require(cfg.classes >= 2, ErrorKind::kInput, "synthetic dataset needs at least 2 classes");
  require(cfg.spatial.size() == (cfg.modality == Modality::kTwoD ? 2u : 3u), ErrorKind::kInput,
          "spatial dims do not match modality");
  Xoshiro256 rng(cfg.seed);
  Dataset<float> ds;
  ds.modality = cfg.modality;
  ds.num_classes = cfg.classes;
  Shape shape = cfg.spatial;
  shape.push_back(cfg.channels);
  auto fill = [&](std::vector<Sample<float>>& out, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
      Sample<float> s;
      s.label = i % cfg.classes;
      const double mean = -0.5 + static_cast<double>(s.label) / static_cast<double>(cfg.classes - 1);
      s.input = Tensor<float>(shape);
      for (auto& v : s.input.data()) v = static_cast<float>(rng.normal(mean, cfg.noise));
      out.push_back(std::move(s));
    }
  };
  fill(ds.train, cfg.train);
  fill(ds.val, cfg.val);
  fill(ds.test, cfg.test);
  return ds;
}

// Writes <dir>/<split>/<index>.uten files plus <dir>/manifest.csv.
inline DatasetManifest write_dataset(const Dataset<float>& ds, const std::filesystem::path& dir) {
  DatasetManifest m;
  m.root = dir;
  for (Split s : {Split::kTrain, Split::kVal, Split::kTest}) {
    const auto& samples = ds.split(s);
    if (samples.empty()) continue;
    std::filesystem::create_directories(dir / to_string(s));
    for (std::size_t i = 0; i < samples.size(); ++i) {
      char name[32];
      std::snprintf(name, sizeof name, "%05zu.uten", i);
      const std::string rel = std::string(to_string(s)) + "/" + name;
      save_uten(samples[i].input, dir / rel);
      std::string label;
      if (ds.multi_label) {
        for (std::size_t k = 0; k < samples[i].label_vector.size(); ++k)
          label += (k ? ";" : "") + std::to_string(samples[i].label_vector[k]);
      } else {
        label = std::to_string(samples[i].label);
      }
      m.entries.push_back({s, rel, label});
    }
  }
  write_manifest(m, dir / "manifest.csv");
  return m;
}

}  // namespace ucad
