// Copyright 2026 The moe-lab Authors
// SPDX-License-Identifier: Apache-2.0
#include "moelab/report.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "json.hpp"
#include "moelab/artifacts.hpp"
#include "moelab/config.hpp"
#include "moelab/errors.hpp"

namespace moelab {

namespace {

using nlohmann::json;

struct CsvFile {
  bool present = false;
  std::string hash;
  std::string seed;
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

// Artifact CSVs carry "# config_hash=<h> seed=<s>" as their first line.
bool parse_stamp(const std::string& line, std::string* hash, std::string* seed) {
  const std::string kHash = "# config_hash=";
  if (line.rfind(kHash, 0) != 0) return false;
  const auto sp = line.find(' ', kHash.size());
  if (sp == std::string::npos) return false;
  *hash = line.substr(kHash.size(), sp - kHash.size());
  const std::string kSeed = "seed=";
  const auto at = line.find(kSeed, sp);
  if (at == std::string::npos) return false;
  *seed = line.substr(at + kSeed.size());
  return true;
}

CsvFile read_csv(const std::filesystem::path& p) {
  CsvFile f;
  std::ifstream in(p);
  if (!in) return f;
  f.present = true;
  std::string line;
  bool have_header = false;
  bool first = true;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (first) {
      first = false;
      if (parse_stamp(line, &f.hash, &f.seed)) continue;
    }
    if (line[0] == '#') continue;
    if (!have_header) {
      f.header = split_csv(line);
      have_header = true;
    } else {
      f.rows.push_back(split_csv(line));
    }
  }
  return f;
}

struct RunData {
  std::string name;
  std::filesystem::path dir;
  json summary;  // null when missing
  std::string hash;
  std::string head = "?";
  std::string model_desc = "?";
  double mac_ratio = -1.0;  // active/total expert MACs; -1 when unknown
  CsvFile metrics, curvature, sweep, utilization, class_expert, bench;
  std::vector<std::string> missing;
};

const char* const kArtifactNames[] = {"metrics.csv",     "curvature.csv",
                                      "sweep.csv",       "utilization.csv",
                                      "class_expert.csv", "bench.csv"};

CsvFile* artifact_slot(RunData& r, const std::string& name) {
  if (name == "metrics.csv") return &r.metrics;
  if (name == "curvature.csv") return &r.curvature;
  if (name == "sweep.csv") return &r.sweep;
  if (name == "utilization.csv") return &r.utilization;
  if (name == "class_expert.csv") return &r.class_expert;
  if (name == "bench.csv") return &r.bench;
  return nullptr;
}

bool load_run(const std::filesystem::path& dir, bool force, RunData* out,
              std::vector<std::string>* warnings) {
  out->name = dir.filename().string();
  if (out->name.empty()) out->name = dir.parent_path().filename().string();
  out->dir = dir;

  if (!std::filesystem::is_directory(dir)) {
    warnings->push_back("skipping '" + dir.string() + "': not a directory");
    return false;
  }

  const auto summary_path = dir / "summary.json";
  if (std::filesystem::exists(summary_path)) {
    std::ifstream in(summary_path);
    try {
      out->summary = json::parse(in);
    } catch (const json::exception& e) {
      warnings->push_back("skipping '" + dir.string() + "': bad summary.json (" +
                          e.what() + ")");
      return false;
    }
  } else {
    out->summary = nullptr;
    out->missing.push_back("summary.json");
  }

  std::vector<std::string> hashes;
  if (!out->summary.is_null() && out->summary.contains("config_hash")) {
    hashes.push_back(out->summary["config_hash"].get<std::string>());
  }
  for (const char* name : kArtifactNames) {
    CsvFile* slot = artifact_slot(*out, name);
    *slot = read_csv(dir / name);
    if (!slot->present) {
      out->missing.push_back(name);
    } else if (!slot->hash.empty()) {
      hashes.push_back(slot->hash);
    }
  }
  if (hashes.empty()) {
    warnings->push_back("skipping '" + dir.string() + "': no artifacts found");
    return false;
  }
  for (const auto& h : hashes) {
    if (h != hashes.front()) {
      if (!force) {
        warnings->push_back("skipping '" + dir.string() +
                            "': artifacts carry mismatched config hashes (use "
                            "--force to merge)");
        return false;
      }
      warnings->push_back("run '" + out->name +
                          "' has mismatched config hashes; merged by --force");
      break;
    }
  }
  out->hash = hashes.front();

  if (!out->summary.is_null() && out->summary.contains("config")) {
    try {
      const LabConfig cfg = parse_lab_config(out->summary["config"].dump());
      out->head = cfg.model.head;
      out->model_desc = cfg.model.head;
      if (cfg.model.is_moe()) {
        out->model_desc += "(N=" + std::to_string(cfg.model.experts);
        if (cfg.model.is_topk()) {
          out->model_desc += ",k=" + std::to_string(cfg.model.effective_k());
        }
        out->model_desc += ")";
      }
      const FlopCounts fl = count_flops(cfg.model);
      out->mac_ratio = fl.active_ratio();
    } catch (const Error& e) {
      warnings->push_back("run '" + out->name +
                          "': config in summary.json does not parse (" +
                          e.what() + ")");
    }
  }
  return true;
}

int column_of(const CsvFile& f, const std::string& name) {
  for (std::size_t i = 0; i < f.header.size(); ++i) {
    if (f.header[i] == name) return static_cast<int>(i);
  }
  return -1;
}

std::string summary_field(const json& s, const char* key) {
  if (s.is_null() || !s.contains(key)) return "";
  const json& v = s[key];
  if (v.is_string()) return v.get<std::string>();
  if (v.is_number_integer()) return std::to_string(v.get<long long>());
  if (v.is_number_unsigned()) return std::to_string(v.get<unsigned long long>());
  if (v.is_number_float()) return format_double(v.get<double>());
  return v.dump();
}

void emit(const std::filesystem::path& path, const std::string& content,
          ReportResult* res) {
  atomic_write_file(path, content);
  res->written.push_back(path);
}

}  // namespace

ReportResult write_report(const ReportOptions& opts) {
  if (opts.run_dirs.empty()) {
    throw UsageError("report needs at least one run directory");
  }
  std::filesystem::create_directories(opts.out_dir);

  ReportResult res;
  std::vector<RunData> runs;
  for (const auto& dir : opts.run_dirs) {
    RunData r;
    if (load_run(dir, opts.force, &r, &res.warnings)) runs.push_back(std::move(r));
  }
  if (runs.empty()) {
    throw UsageError("report: no usable run directories");
  }

  // runs.csv maps each run to its producing config and seed.
  {
    std::string s = "run,model,config_hash,seed,data_source\n";
    for (const auto& r : runs) {
      s += r.name + "," + r.model_desc + "," + r.hash + "," +
           summary_field(r.summary, "seed") + "," +
           summary_field(r.summary, "data_source") + "\n";
    }
    emit(opts.out_dir / "runs.csv", s, &res);
  }

  {
    std::string s = "run,model,m_a,ett_m_a,v_a,ett_v_a,seed,config_hash\n";
    for (const auto& r : runs) {
      if (r.summary.is_null() || !r.summary.contains("m_a")) continue;
      s += r.name + "," + r.model_desc + "," + summary_field(r.summary, "m_a") +
           "," + summary_field(r.summary, "ett_m_a") + "," +
           summary_field(r.summary, "v_a") + "," +
           summary_field(r.summary, "ett_v_a") + "," +
           summary_field(r.summary, "seed") + "," + r.hash + "\n";
    }
    emit(opts.out_dir / "table_accuracy.csv", s, &res);
  }

  {
    std::string s = "run,model,metric,split,value,stderr_or_residual,iters_or_samples,seed\n";
    for (const auto& r : runs) {
      for (const auto& row : r.curvature.rows) {
        s += r.name + "," + r.model_desc;
        for (const auto& cell : row) s += "," + cell;
        s += "\n";
      }
    }
    emit(opts.out_dir / "table_curvature.csv", s, &res);
  }

  {
    std::string s =
        "run,model,batch_size,params_m,ms_per_batch_median,ms_iqr,img_per_s,"
        "peak_mem_bytes,expert_mac_ratio\n";
    for (const auto& r : runs) {
      const int bcol = column_of(r.bench, "batch_size");
      for (const auto& row : r.bench.rows) {
        if (bcol < 0) break;
        s += r.name;
        for (const auto& cell : row) s += "," + cell;
        s += "," + (r.mac_ratio >= 0 ? format_double(r.mac_ratio) : std::string());
        s += "\n";
      }
    }
    emit(opts.out_dir / "table_efficiency.csv", s, &res);
  }

  {
    std::string s = "run,epoch,expert,utilization\n";
    for (const auto& r : runs) {
      if (!r.metrics.present) continue;
      const int ecol = column_of(r.metrics, "epoch");
      if (ecol < 0) continue;
      std::vector<int> ucols;
      for (std::size_t i = 0; i < r.metrics.header.size(); ++i) {
        if (r.metrics.header[i].rfind("util_", 0) == 0) {
          ucols.push_back(static_cast<int>(i));
        }
      }
      for (const auto& row : r.metrics.rows) {
        for (std::size_t u = 0; u < ucols.size(); ++u) {
          s += r.name + "," + row[static_cast<std::size_t>(ecol)] + "," +
               std::to_string(u) + "," +
               row[static_cast<std::size_t>(ucols[u])] + "\n";
        }
      }
    }
    emit(opts.out_dir / "utilization_timeseries.csv", s, &res);
  }

  {
    std::string s = "run,class,expert,weight\n";
    for (const auto& r : runs) {
      if (!r.class_expert.present) continue;
      const int ccol = column_of(r.class_expert, "class");
      if (ccol < 0) continue;
      for (const auto& row : r.class_expert.rows) {
        for (std::size_t i = 0; i < row.size(); ++i) {
          if (static_cast<int>(i) == ccol) continue;
          const std::string& name = r.class_expert.header[i];
          const auto us = name.rfind('_');
          const std::string expert =
              us == std::string::npos ? name : name.substr(us + 1);
          s += r.name + "," + row[static_cast<std::size_t>(ccol)] + "," +
               expert + "," + row[i] + "\n";
        }
      }
    }
    emit(opts.out_dir / "class_expert_long.csv", s, &res);
  }

  {
    std::string s = "run,alpha,loss,flip_count\n";
    for (const auto& r : runs) {
      if (!r.sweep.present) continue;
      const bool has_flips = column_of(r.sweep, "flip_count") >= 0;
      for (const auto& row : r.sweep.rows) {
        s += r.name + "," + row[0] + "," + row[1] + ",";
        if (has_flips && row.size() > 2) s += row[2];
        s += "\n";
      }
    }
    emit(opts.out_dir / "sweep_consolidated.csv", s, &res);
  }

  // report.md: one overview with every table inline.
  {
    std::ostringstream md;
    md << "# Run report\n\n## Runs\n\n";
    md << "| run | model | config hash | seed | data |\n|---|---|---|---|---|\n";
    for (const auto& r : runs) {
      md << "| " << r.name << " | " << r.model_desc << " | " << r.hash << " | "
         << summary_field(r.summary, "seed") << " | "
         << summary_field(r.summary, "data_source") << " |\n";
    }

    md << "\n## Accuracy\n\n";
    md << "| run | model | M_A | ETT(M_A) | V_A | ETT(V_A) |\n|---|---|---|---|---|---|\n";
    for (const auto& r : runs) {
      if (r.summary.is_null() || !r.summary.contains("m_a")) continue;
      md << "| " << r.name << " | " << r.model_desc << " | "
         << summary_field(r.summary, "m_a") << " | "
         << summary_field(r.summary, "ett_m_a") << " | "
         << summary_field(r.summary, "v_a") << " | "
         << summary_field(r.summary, "ett_v_a") << " |\n";
    }

    md << "\n## Curvature\n\n";
    md << "| run | metric | split | value | stderr/residual | iters/samples |\n"
       << "|---|---|---|---|---|---|\n";
    for (const auto& r : runs) {
      for (const auto& row : r.curvature.rows) {
        if (row.size() < 5) continue;
        md << "| " << r.name << " | " << row[0] << " | " << row[1] << " | "
           << row[2] << " | " << row[3] << " | " << row[4] << " |\n";
      }
    }

    md << "\n## Efficiency\n\n";
    md << "Theoretical active/total expert MAC ratios sit next to measured "
          "timings; the gap between the two is the point of comparison.\n\n";
    md << "| run | batch | ms/batch (median) | img/s | peak mem (bytes) | "
          "expert MAC ratio |\n|---|---|---|---|---|---|\n";
    for (const auto& r : runs) {
      const int bcol = column_of(r.bench, "batch_size");
      const int mcol = column_of(r.bench, "ms_per_batch_median");
      const int icol = column_of(r.bench, "img_per_s");
      const int pcol = column_of(r.bench, "peak_mem_bytes");
      if (bcol < 0 || mcol < 0 || icol < 0) continue;
      for (const auto& row : r.bench.rows) {
        md << "| " << r.name << " | " << row[static_cast<std::size_t>(bcol)]
           << " | " << row[static_cast<std::size_t>(mcol)] << " | "
           << row[static_cast<std::size_t>(icol)] << " | "
           << (pcol >= 0 ? row[static_cast<std::size_t>(pcol)] : std::string())
           << " | " << (r.mac_ratio >= 0 ? format_double(r.mac_ratio) : std::string())
           << " |\n";
      }
    }

    bool any_missing = false;
    for (const auto& r : runs) any_missing |= !r.missing.empty();
    if (any_missing) {
      md << "\n## Missing artifacts\n\n";
      for (const auto& r : runs) {
        for (const auto& m : r.missing) md << "- " << r.name << ": " << m << "\n";
      }
    }
    if (!res.warnings.empty()) {
      md << "\n## Warnings\n\n";
      for (const auto& w : res.warnings) md << "- " << w << "\n";
    }
    emit(opts.out_dir / "report.md", md.str(), &res);
  }

  return res;
}

}  // namespace moelab
