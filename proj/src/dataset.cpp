// SPDX-License-Identifier: Apache-2.0

#include "signstream/dataset.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace signstream {

Dataset Dataset::slice(std::size_t begin, std::size_t end) const {
  if (begin > end || end > sequences.size()) throw ArgumentError("dataset slice out of range");
  Dataset out;
  out.num_classes = num_classes;
  out.dims = dims;
  for (std::size_t i = begin; i < end; ++i) {
    out.sequences.push_back(sequences[i]);
    out.ids.push_back(i < ids.size() ? ids[i] : "");
    out.labels.push_back(i < labels.size() ? labels[i] : -1);
  }
  return out;
}

Dataset dataset_from_synthetic(SyntheticDataset&& synth) {
  Dataset ds;
  ds.num_classes = synth.num_classes;
  ds.dims = synth.dims;
  ds.sequences = std::move(synth.sequences);
  ds.labels = std::move(synth.labels);
  ds.ids.reserve(ds.sequences.size());
  for (std::size_t i = 0; i < ds.sequences.size(); ++i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "seq_%05zu", i);
    ds.ids.emplace_back(buf);
  }
  return ds;
}

void write_label_file(const std::vector<LabelRecord>& records,
                      const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot open for writing: " + path.string());
  for (const auto& r : records) f << r.file << '\t' << r.task << '\t' << r.class_id << '\n';
  if (!f) throw IoError("write failed: " + path.string());
}

std::vector<LabelRecord> read_label_file(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open for reading: " + path.string());
  std::vector<LabelRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ss(line);
    LabelRecord r;
    std::string id_text;
    if (!std::getline(ss, r.file, '\t') || !std::getline(ss, r.task, '\t') ||
        !std::getline(ss, id_text))
      throw DataError("labels file: malformed line " + std::to_string(lineno));
    try {
      r.class_id = std::stoi(id_text);
    } catch (const std::exception&) {
      throw DataError("labels file: bad class id on line " + std::to_string(lineno));
    }
    out.push_back(std::move(r));
  }
  return out;
}

void save_dataset(const Dataset& ds, const std::filesystem::path& dir,
                  const std::string& task_name) {
  std::filesystem::create_directories(dir);
  std::vector<LabelRecord> records;
  for (std::size_t i = 0; i < ds.sequences.size(); ++i) {
    const std::string name = ds.ids[i] + ".msf";
    write_msf(ds.sequences[i], dir / name);
    if (i < ds.labels.size() && ds.labels[i] >= 0)
      records.push_back({name, task_name, ds.labels[i]});
  }
  if (!records.empty()) write_label_file(records, dir / "labels.tsv");

  nlohmann::json manifest;
  manifest["num_sequences"] = ds.sequences.size();
  manifest["num_classes"] = ds.num_classes;
  manifest["channel_dims"] = ds.dims;
  std::ofstream mf(dir / "manifest.json", std::ios::trunc);
  mf << manifest.dump(2) << '\n';
}

Dataset load_dataset(const std::filesystem::path& dir, const std::string& task_name) {
  if (!std::filesystem::is_directory(dir)) throw IoError("not a directory: " + dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".msf") files.push_back(e.path());
  std::sort(files.begin(), files.end());

  Dataset ds;
  for (const auto& p : files) {
    ds.sequences.push_back(read_msf(p));
    ds.ids.push_back(p.stem().string());
  }
  if (!ds.sequences.empty()) ds.dims = ds.sequences.front().dims();
  for (const auto& seq : ds.sequences) seq.validate(&ds.dims);

  ds.labels.assign(ds.sequences.size(), -1);
  const auto label_path = dir / "labels.tsv";
  if (std::filesystem::exists(label_path)) {
    int max_label = -1;
    for (const auto& r : read_label_file(label_path)) {
      if (r.task != task_name) continue;
      const auto it = std::find(ds.ids.begin(), ds.ids.end(),
                                std::filesystem::path(r.file).stem().string());
      if (it == ds.ids.end()) throw DataError("labels file references unknown sequence " + r.file);
      ds.labels[static_cast<std::size_t>(it - ds.ids.begin())] = r.class_id;
      max_label = std::max(max_label, r.class_id);
    }
    ds.num_classes = max_label + 1;
  }
  return ds;
}

} // namespace signstream
