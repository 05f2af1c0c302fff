#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "prunekit/compaction.hpp"
#include "prunekit/training.hpp"

namespace prunekit {

// Stage records are line-delimited JSON; one object per logged step.
std::string step_record_json(const StepRecord& rec);
StepRecord step_record_from_json(const std::string& line);

std::string compaction_report_json(const CompactionReport& rep);
CompactionReport compaction_report_from_json(const std::string& text);

// All records found in stages.jsonl / pretrain_log.jsonl files under dir.
std::vector<StepRecord> load_stage_records(const std::string& run_dir);

// Consolidated table (one row per pipeline stage) from final records.
std::string render_report_table(const std::vector<StepRecord>& records);

}  // namespace prunekit
