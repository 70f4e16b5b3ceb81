#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "olv/common.hpp"
#include "olv/domain.hpp"
#include "olv/evaluation.hpp"

namespace olv {

using json = nlohmann::json;

// --- model config <-> JSON --------------------------------------------------

inline json config_to_json(const ModelConfig& c) {
  json j;
  j["l_ws"] = c.l_ws;
  j["l_step"] = c.l_step;
  j["embed_dims"] = c.embed_dims;
  j["transformer_depth"] = c.transformer_depth;
  j["transformer_heads"] = c.transformer_heads;
  j["freq_feat_dim"] = c.freq_feat_dim;
  j["sigma"] = c.sigma;
  j["smoothing_halfwidth"] = c.smoothing_halfwidth;
  j["aux_loss_weight"] = c.aux_loss_weight;
  j["lr"] = c.lr;
  j["weight_decay"] = c.weight_decay;
  j["batch_size"] = c.batch_size;
  j["momentum"] = c.momentum;
  j["encoder_kind"] = encoder_name(c.encoder_kind);
  j["use_spectrum"] = c.use_spectrum;
  j["seed"] = c.seed;
  j["use_smoothing"] = c.use_smoothing;
  j["masked_channel"] =
      c.masked_channel >= 0 ? json(kChannelNames[c.masked_channel]) : json(nullptr);
  j["nesterov"] = c.nesterov;
  j["ffn_mult"] = c.ffn_mult;
  j["dropout"] = c.dropout;
  return j;
}

// Strict parse: unknown keys are rejected, missing keys keep their defaults.
inline ModelConfig config_from_json(const json& j) {
  static const std::vector<std::string> known = {
      "l_ws", "l_step", "embed_dims", "transformer_depth", "transformer_heads",
      "freq_feat_dim", "sigma", "smoothing_halfwidth", "aux_loss_weight", "lr",
      "weight_decay", "batch_size", "momentum", "encoder_kind", "use_spectrum",
      "seed", "use_smoothing", "masked_channel", "nesterov", "ffn_mult", "dropout"};
  for (const auto& [key, _] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end())
      throw Error(ErrorKind::Usage, "unknown config key: " + key);
  }
  ModelConfig c;
  if (j.contains("l_ws")) c.l_ws = j["l_ws"].get<int>();
  if (j.contains("l_step")) c.l_step = j["l_step"].get<int>();
  if (j.contains("embed_dims")) {
    const auto dims = j["embed_dims"].get<std::vector<int>>();
    if (dims.size() != 3)
      throw Error(ErrorKind::Usage, "embed_dims must have exactly 3 entries");
    c.embed_dims = {dims[0], dims[1], dims[2]};
  }
  if (j.contains("transformer_depth")) c.transformer_depth = j["transformer_depth"].get<int>();
  if (j.contains("transformer_heads")) c.transformer_heads = j["transformer_heads"].get<int>();
  if (j.contains("freq_feat_dim")) c.freq_feat_dim = j["freq_feat_dim"].get<int>();
  if (j.contains("sigma")) c.sigma = j["sigma"].get<double>();
  if (j.contains("smoothing_halfwidth"))
    c.smoothing_halfwidth = j["smoothing_halfwidth"].get<int>();
  if (j.contains("aux_loss_weight")) c.aux_loss_weight = j["aux_loss_weight"].get<double>();
  if (j.contains("lr")) c.lr = j["lr"].get<double>();
  if (j.contains("weight_decay")) c.weight_decay = j["weight_decay"].get<double>();
  if (j.contains("batch_size")) c.batch_size = j["batch_size"].get<int>();
  if (j.contains("momentum")) c.momentum = j["momentum"].get<double>();
  if (j.contains("encoder_kind")) {
    const auto s = j["encoder_kind"].get<std::string>();
    if (s == "transformer") c.encoder_kind = EncoderKind::Transformer;
    else if (s == "lstm") c.encoder_kind = EncoderKind::LSTM;
    else if (s == "mlp") c.encoder_kind = EncoderKind::MLP;
    else throw Error(ErrorKind::Usage, "encoder_kind must be transformer|lstm|mlp");
  }
  if (j.contains("use_spectrum")) c.use_spectrum = j["use_spectrum"].get<bool>();
  if (j.contains("seed")) c.seed = j["seed"].get<std::int64_t>();
  if (j.contains("use_smoothing")) c.use_smoothing = j["use_smoothing"].get<bool>();
  if (j.contains("masked_channel") && !j["masked_channel"].is_null()) {
    const auto name = j["masked_channel"].get<std::string>();
    const auto ch = channel_from_name(name);
    if (!ch) throw Error(ErrorKind::Usage, "masked_channel: unknown channel " + name);
    c.masked_channel = static_cast<int>(*ch);
  }
  if (j.contains("nesterov")) c.nesterov = j["nesterov"].get<bool>();
  if (j.contains("ffn_mult")) c.ffn_mult = j["ffn_mult"].get<int>();
  if (j.contains("dropout")) c.dropout = j["dropout"].get<double>();
  if (const auto v = c.validate(); !v.empty())
    throw Error(ErrorKind::Usage, "invalid config: " + v.front());
  return c;
}

inline ModelConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Usage, "cannot open config file: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw Error(ErrorKind::Usage, "config parse error: " + std::string(e.what()), path);
  }
  return config_from_json(j);
}

// --- dataset on disk: long-format signals CSV + labels JSON -----------------

inline void write_signals_csv(const Dataset& ds, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::Data, "cannot write " + path);
  out << "record_id,minute,channel,value\n";
  for (const auto& r : ds.records) {
    for (int c = 0; c < kNumChannels; ++c) {
      for (int t = 0; t < r.duration_min; ++t) {
        out << r.record_id << ',' << t << ',' << kChannelNames[c] << ',';
        const auto& v = r.signals[c][t];
        if (v.has_value()) {
          std::ostringstream num;
          num.precision(17);
          num << *v;
          out << num.str();
        }
        out << '\n';
      }
    }
  }
}

inline void write_labels_json(const Dataset& ds, const std::string& path) {
  json recs = json::array();
  for (const auto& r : ds.records) {
    json e;
    e["record_id"] = r.record_id;
    e["site"] = site_name(r.site);
    e["duration_min"] = r.duration_min;
    e["olv_start"] = r.olv_start ? json(*r.olv_start) : json(nullptr);
    e["olv_end"] = r.olv_end ? json(*r.olv_end) : json(nullptr);
    recs.push_back(e);
  }
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::Data, "cannot write " + path);
  out << json{{"records", recs}}.dump(2) << '\n';
}

inline void write_dataset(const Dataset& ds, const std::string& dir) {
  std::filesystem::create_directories(dir);
  write_signals_csv(ds, dir + "/signals.csv");
  write_labels_json(ds, dir + "/labels.json");
}

inline Dataset read_dataset(const std::string& dir) {
  const std::string labels_path = dir + "/labels.json";
  std::ifstream lin(labels_path);
  if (!lin) throw Error(ErrorKind::Data, "cannot open " + labels_path);
  json lj;
  try {
    lin >> lj;
  } catch (const json::exception& e) {
    throw Error(ErrorKind::Data, "labels parse error: " + std::string(e.what()), labels_path);
  }
  Dataset ds;
  std::map<std::string, int> index;
  for (const auto& e : lj.at("records")) {
    PatientRecord r;
    r.record_id = e.at("record_id").get<std::string>();
    const auto site = e.at("site").get<std::string>();
    if (site == "A") r.site = Site::A;
    else if (site == "B") r.site = Site::B;
    else throw Error(ErrorKind::Data, "unknown site " + site, r.record_id);
    r.duration_min = e.at("duration_min").get<int>();
    if (!e.at("olv_start").is_null()) r.olv_start = e.at("olv_start").get<int>();
    if (!e.at("olv_end").is_null()) r.olv_end = e.at("olv_end").get<int>();
    r.signals.assign(kNumChannels,
                     std::vector<std::optional<double>>(r.duration_min, std::nullopt));
    index[r.record_id] = static_cast<int>(ds.records.size());
    ds.records.push_back(std::move(r));
  }

  const std::string csv_path = dir + "/signals.csv";
  std::ifstream in(csv_path);
  if (!in) throw Error(ErrorKind::Data, "cannot open " + csv_path);
  std::string line;
  if (!std::getline(in, line))
    throw Error(ErrorKind::Data, "empty signals file", csv_path);
  if (line != "record_id,minute,channel,value")
    throw Error(ErrorKind::Data, "unexpected CSV header: " + line, csv_path);
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::array<std::string, 4> field;
    std::size_t pos = 0;
    for (int f = 0; f < 3; ++f) {
      const auto comma = line.find(',', pos);
      if (comma == std::string::npos)
        throw Error(ErrorKind::Data, "malformed CSV line " + std::to_string(lineno), csv_path);
      field[f] = line.substr(pos, comma - pos);
      pos = comma + 1;
    }
    field[3] = line.substr(pos);

    const auto it = index.find(field[0]);
    if (it == index.end())
      throw Error(ErrorKind::Data, "signals reference unknown record " + field[0], csv_path);
    PatientRecord& r = ds.records[it->second];
    const int minute = std::stoi(field[1]);
    if (minute < 0 || minute >= r.duration_min)
      throw Error(ErrorKind::Data, "minute out of range on line " + std::to_string(lineno),
                  csv_path);
    const auto ch = channel_from_name(field[2]);
    if (!ch)
      throw Error(ErrorKind::Data, "unknown channel " + field[2], csv_path);
    if (!field[3].empty())
      r.signals[static_cast<int>(*ch)][minute] = std::stod(field[3]);
  }

  for (const auto& r : ds.records) {
    if (const auto v = validate_record(r); !v.empty())
      throw Error(ErrorKind::Data, "invalid record: " + v.front(), r.record_id);
  }
  if (const auto v = validate_dataset(ds); !v.empty())
    throw Error(ErrorKind::Data, v.front());
  return ds;
}

// --- predictions JSONL -------------------------------------------------------

inline json prediction_to_json(const Prediction& p, const std::string& trace_path = "") {
  json j;
  j["record_id"] = p.record_id;
  j["event"] = event_name(p.event_kind);
  j["predicted_min"] = p.predicted_min;
  j["peak_score"] = p.peak_score;
  if (!trace_path.empty()) j["trace_path"] = trace_path;
  return j;
}

struct PredictionRow {
  std::string record_id;
  EventKind event_kind = EventKind::Start;
  int predicted_min = 0;
  double peak_score = 0.0;
};

inline std::vector<PredictionRow> read_predictions(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Data, "cannot open predictions file: " + path);
  std::vector<PredictionRow> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw Error(ErrorKind::Data, "predictions parse error: " + std::string(e.what()), path);
    }
    PredictionRow r;
    r.record_id = j.at("record_id").get<std::string>();
    const auto ev = j.at("event").get<std::string>();
    if (ev == "start") r.event_kind = EventKind::Start;
    else if (ev == "end") r.event_kind = EventKind::End;
    else throw Error(ErrorKind::Data, "unknown event kind " + ev, path);
    r.predicted_min = j.at("predicted_min").get<int>();
    if (j.contains("peak_score")) r.peak_score = j["peak_score"].get<double>();
    rows.push_back(std::move(r));
  }
  return rows;
}

// --- evaluation reports -------------------------------------------------------

inline json report_to_json(const EvalReport& r) {
  json j;
  j["n"] = r.n;
  j["mae_min"] = r.mae_min;
  json acc;
  for (int k = 1; k <= 5; ++k) acc[std::to_string(k)] = r.acc[k - 1];
  j["acc"] = acc;
  json hist;
  for (const auto& [err, count] : r.histogram) hist[std::to_string(err)] = count;
  j["histogram"] = hist;
  return j;
}

inline void write_histogram_csv(const EvalReport& r, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::Data, "cannot write " + path);
  out << "signed_error_min,count\n";
  for (const auto& [err, count] : r.histogram) out << err << ',' << count << '\n';
}

// Aligned start|end rows in the papers' table layout.
inline std::string format_report_table(
    const std::vector<std::pair<std::string, std::pair<EvalReport, EvalReport>>>& rows) {
  std::ostringstream os;
  os << std::left;
  os.width(18);
  os << "method";
  os << "  MAE           acc5          acc4          acc3          acc2          acc1\n";
  for (const auto& [name, pair] : rows) {
    const auto& [s, e] = pair;
    os.width(18);
    os << name << "  ";
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%5.2f | %-5.2f ", s.mae_min, e.mae_min);
    os << buf;
    for (int k = 4; k >= 0; --k) {
      std::snprintf(buf, sizeof(buf), "%5.1f | %-5.1f ", 100.0 * s.acc[k], 100.0 * e.acc[k]);
      os << buf;
    }
    os << '\n';
  }
  return os.str();
}

}  // namespace olv
