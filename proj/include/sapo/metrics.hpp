#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "sapo/errors.hpp"

namespace sapo {

// One CSV row per training iteration/step; optional fields print empty.
struct StepMetrics {
  std::int64_t step = 0;
  std::string stage;
  std::optional<double> loss_total;
  std::optional<double> loss_sft;
  std::optional<double> loss_contrastive;
  std::optional<double> margin;
  std::optional<double> grad_norm;
  std::optional<double> pref_margin_mean;
  std::optional<std::size_t> buffer_size;
  std::optional<double> buffer_mean_count;
  std::optional<double> eval_acc;
};

inline const char* metrics_csv_header() {
  return "step,stage,loss_total,loss_sft,loss_contrastive,margin,grad_norm,"
         "pref_margin_mean,buffer_size,buffer_mean_count,eval_acc";
}

namespace detail {

// Shortest round-trip decimal form; locale-free and bit-reproducible.
inline std::string fmt_double(double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

inline std::string fmt_opt(const std::optional<double>& v) {
  return v ? fmt_double(*v) : std::string();
}

}  // namespace detail

inline std::string csv_row(const StepMetrics& m) {
  std::string row = std::to_string(m.step);
  row += ',';
  row += m.stage;
  for (const auto& f : {m.loss_total, m.loss_sft, m.loss_contrastive, m.margin, m.grad_norm,
                        m.pref_margin_mean}) {
    row += ',';
    row += detail::fmt_opt(f);
  }
  row += ',';
  if (m.buffer_size) row += std::to_string(*m.buffer_size);
  row += ',';
  row += detail::fmt_opt(m.buffer_mean_count);
  row += ',';
  row += detail::fmt_opt(m.eval_acc);
  return row;
}

inline void write_metrics_csv(const std::filesystem::path& path,
                              const std::vector<StepMetrics>& rows) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataFormatError("cannot open for writing: " + path.string());
  os << metrics_csv_header() << '\n';
  for (const StepMetrics& m : rows) os << csv_row(m) << '\n';
}

}  // namespace sapo
