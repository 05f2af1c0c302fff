#include "prunekit/reports.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "prunekit/errors.hpp"

namespace prunekit {

namespace {

using nlohmann::json;

json breakdown_to_json(const LossBreakdown& b) {
  return json{{"l_tts", b.l_tts},   {"l_reg", b.l_reg},       {"lambda", b.lambda},
              {"l_total", b.l_total}, {"density", b.density}};
}

LossBreakdown breakdown_from_json(const json& j) {
  LossBreakdown b;
  b.l_tts = j.at("l_tts").get<double>();
  b.l_reg = j.at("l_reg").get<double>();
  b.lambda = j.at("lambda").get<double>();
  b.l_total = j.at("l_total").get<double>();
  b.density = j.at("density").get<double>();
  return b;
}

}  // namespace

std::string step_record_json(const StepRecord& rec) {
  json j{{"pipeline", rec.pipeline},
         {"stage", rec.stage},
         {"stage_index", rec.stage_index},
         {"step", rec.step},
         {"loss", breakdown_to_json(rec.loss)},
         {"sparsity", rec.sparsity_pct},
         {"final", rec.final_record}};
  if (rec.has_eval) j["eval_loss"] = rec.eval_loss;
  if (rec.final_record) {
    j["params_before"] = rec.params_before;
    j["params_after"] = rec.params_after;
    j["polarization"] = rec.polarization;
  }
  return j.dump();
}

StepRecord step_record_from_json(const std::string& line) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::exception& e) {
    throw DataError(std::string("stage record: bad JSON: ") + e.what());
  }
  StepRecord rec;
  try {
    rec.pipeline = j.at("pipeline").get<std::string>();
    rec.stage = j.at("stage").get<std::string>();
    rec.stage_index = j.at("stage_index").get<std::size_t>();
    rec.step = j.at("step").get<std::size_t>();
    rec.loss = breakdown_from_json(j.at("loss"));
    rec.sparsity_pct = j.at("sparsity").get<double>();
    rec.final_record = j.at("final").get<bool>();
    if (j.contains("eval_loss")) {
      rec.has_eval = true;
      rec.eval_loss = j.at("eval_loss").get<double>();
    }
    if (rec.final_record) {
      rec.params_before = j.at("params_before").get<std::size_t>();
      rec.params_after = j.at("params_after").get<std::size_t>();
      rec.polarization = j.at("polarization").get<double>();
    }
  } catch (const json::exception& e) {
    throw DataError(std::string("stage record: missing field: ") + e.what());
  }
  return rec;
}

std::string compaction_report_json(const CompactionReport& rep) {
  json dims = json::array();
  for (const auto& d : rep.dims) {
    dims.push_back(json{{"name", d.name}, {"kept", d.kept}, {"total", d.total}, {"rescued", d.rescued}});
  }
  const json j{{"params_before", rep.params_before},
               {"params_after", rep.params_after},
               {"maskable_before", rep.maskable_before},
               {"sparsity_pct", rep.sparsity_pct},
               {"ratio", rep.ratio},
               {"max_residual", rep.max_residual},
               {"rescued", rep.rescued},
               {"dims", dims}};
  return j.dump(2);
}

CompactionReport compaction_report_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw DataError(std::string("compaction report: bad JSON: ") + e.what());
  }
  CompactionReport rep;
  rep.params_before = j.at("params_before").get<std::size_t>();
  rep.params_after = j.at("params_after").get<std::size_t>();
  rep.maskable_before = j.value("maskable_before", std::size_t{0});
  rep.sparsity_pct = j.at("sparsity_pct").get<double>();
  rep.ratio = j.at("ratio").get<double>();
  rep.max_residual = j.at("max_residual").get<double>();
  rep.rescued = j.at("rescued").get<std::vector<std::string>>();
  for (const auto& d : j.at("dims")) {
    rep.dims.push_back({d.at("name").get<std::string>(), d.at("kept").get<std::size_t>(),
                        d.at("total").get<std::size_t>(), d.at("rescued").get<bool>()});
  }
  return rep;
}

std::vector<StepRecord> load_stage_records(const std::string& run_dir) {
  namespace fs = std::filesystem;
  if (!fs::exists(run_dir)) throw DataError("report: no such directory '" + run_dir + "'");
  std::vector<fs::path> files;
  for (const auto& entry : fs::recursive_directory_iterator(run_dir)) {
    if (!entry.is_regular_file()) continue;
    const auto name = entry.path().filename().string();
    if (name == "stages.jsonl" || name == "pretrain_log.jsonl") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<StepRecord> records;
  for (const auto& f : files) {
    std::ifstream in(f);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      records.push_back(step_record_from_json(line));
    }
  }
  return records;
}

std::string render_report_table(const std::vector<StepRecord>& records) {
  std::vector<StepRecord> finals;
  for (const auto& r : records)
    if (r.final_record && r.pipeline != "pretrain") finals.push_back(r);
  if (finals.empty()) throw DataError("report: no stage records found");
  std::stable_sort(finals.begin(), finals.end(), [](const StepRecord& a, const StepRecord& b) {
    if (a.pipeline != b.pipeline) return a.pipeline < b.pipeline;
    return a.stage_index < b.stage_index;
  });

  std::ostringstream out;
  char buf[192];
  std::snprintf(buf, sizeof(buf), "%-24s %-16s %10s %8s %12s %14s\n", "pipeline", "stage",
                "sparsity%", "ratio", "eval_loss", "polarization");
  out << buf;
  out << std::string(88, '-') << "\n";
  std::string prev;
  for (const auto& r : finals) {
    const double ratio = r.params_after > 0
                             ? static_cast<double>(r.params_before) / static_cast<double>(r.params_after)
                             : 0.0;
    std::snprintf(buf, sizeof(buf), "%-24s %-16s %10.2f %7.2fx %12.4f %14.3f\n",
                  r.pipeline == prev ? "" : r.pipeline.c_str(), r.stage.c_str(), r.sparsity_pct,
                  ratio, r.eval_loss, r.polarization);
    out << buf;
    prev = r.pipeline;
  }
  return out.str();
}

}  // namespace prunekit
