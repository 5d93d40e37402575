// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "signstream/feature_io.hpp"
#include "signstream/synthetic.hpp"

namespace signstream {

// An in-memory dataset: sequences plus their file stems (for reports and
// label files). Labels are optional; -1 means unlabeled.
struct Dataset {
  std::vector<FeatureSequence> sequences;
  std::vector<std::string> ids;
  std::vector<int> labels;
  int num_classes = 0;
  ChannelDims dims{};

  std::size_t size() const { return sequences.size(); }

  // Index-range view [begin, end); shares nothing with the source.
  Dataset slice(std::size_t begin, std::size_t end) const;
};

Dataset dataset_from_synthetic(SyntheticDataset&& synth);

// One record per line: <sequence file>\t<task name>\t<class id>.
struct LabelRecord {
  std::string file;
  std::string task;
  int class_id = 0;
};

void write_label_file(const std::vector<LabelRecord>& records,
                      const std::filesystem::path& path);
std::vector<LabelRecord> read_label_file(const std::filesystem::path& path);

// Writes sequences as seq_00000.msf ... plus labels.tsv and manifest.json.
void save_dataset(const Dataset& ds, const std::filesystem::path& dir,
                  const std::string& task_name = "gesture");

// Loads every *.msf in the directory (sorted by name) and labels.tsv when
// present (records for other tasks are ignored here).
Dataset load_dataset(const std::filesystem::path& dir,
                     const std::string& task_name = "gesture");

} // namespace signstream
