#pragma once

// Head-averaged attention maps and their CSV / plain-PGM export.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "laffi/corpus.hpp"
#include "laffi/csv.hpp"
#include "laffi/errors.hpp"
#include "laffi/transformer.hpp"

namespace laffi {

struct MeanAttention {
  std::vector<std::string> tokens;
  std::size_t size = 0;
  std::vector<double> matrix;  // size×size, row-major

  double at(std::size_t r, std::size_t c) const { return matrix[r * size + c]; }
};

// Element-wise mean over the heads of one layer (the last one by default).
inline MeanAttention mean_attention(const AttentionTrace& trace, std::optional<std::size_t> layer = std::nullopt) {
  if (trace.n_layers == 0 || trace.n_heads == 0) throw IndexError("mean_attention: empty trace");
  const std::size_t l = layer.value_or(trace.n_layers - 1);
  if (l >= trace.n_layers) {
    throw IndexError("mean_attention: layer " + std::to_string(l) + " out of range for " +
                     std::to_string(trace.n_layers) + " layers");
  }
  MeanAttention m;
  m.size = trace.seq_len;
  m.matrix.assign(m.size * m.size, 0.0);
  for (std::size_t h = 0; h < trace.n_heads; ++h) {
    const auto src = trace.head(l, h);
    for (std::size_t i = 0; i < src.size(); ++i) m.matrix[i] += src[i];
  }
  for (auto& v : m.matrix) v /= static_cast<double>(trace.n_heads);
  for (const auto id : trace.tokens) m.tokens.push_back(token_label(id));
  return m;
}

struct NamedModel {
  std::string name;
  const TransformerWeights* weights = nullptr;
  const AdapterSet* adapters = nullptr;
};

// Runs one prompt through every model and returns their mean maps in order.
inline std::vector<MeanAttention> compare_runs(std::string_view prompt, const std::vector<NamedModel>& models,
                                               std::optional<std::size_t> layer = std::nullopt) {
  const auto ids = prompt_tokens(prompt);
  for (const auto& m : models) {
    if (ids.size() > static_cast<std::size_t>(m.weights->config.max_seq_len)) {
      throw LengthError("compare_runs: prompt of " + std::to_string(ids.size()) + " tokens exceeds max_seq_len " +
                        std::to_string(m.weights->config.max_seq_len) + " of model '" + m.name + "'");
    }
  }
  std::vector<MeanAttention> out;
  for (const auto& m : models) {
    auto result = forward(*m.weights, ids, m.adapters, {.capture_trace = true});
    out.push_back(mean_attention(*result.trace, layer));
  }
  return out;
}

inline std::string attention_csv(const MeanAttention& m) {
  std::string out = csv_row(m.tokens);
  std::vector<std::string> row(m.size);
  for (std::size_t i = 0; i < m.size; ++i) {
    for (std::size_t j = 0; j < m.size; ++j) row[j] = format_fixed(m.at(i, j), 6);
    out += csv_row(row);
  }
  return out;
}

// round(v·255) computed on the 6-decimal value in integer arithmetic, so a
// score printed as 0.700000 maps to 179 rather than falling to 178 through
// binary rounding of 0.7·255.
inline int pgm_pixel(double v) {
  const long long micro = std::llround(std::clamp(v, 0.0, 1.0) * 1e6);
  return static_cast<int>((micro * 255 + 500000) / 1000000);
}

inline std::string attention_pgm(const MeanAttention& m) {
  std::string out = "P2\n" + std::to_string(m.size) + " " + std::to_string(m.size) + "\n255\n";
  for (std::size_t i = 0; i < m.size; ++i) {
    for (std::size_t j = 0; j < m.size; ++j) {
      if (j) out += ' ';
      out += std::to_string(pgm_pixel(m.at(i, j)));
    }
    out += '\n';
  }
  return out;
}

enum class HeatmapFormat { CSV, PGM };

inline HeatmapFormat parse_heatmap_format(std::string_view s) {
  if (s == "csv" || s == "CSV") return HeatmapFormat::CSV;
  if (s == "pgm" || s == "PGM") return HeatmapFormat::PGM;
  throw ConfigError("unknown heatmap format '" + std::string(s) + "' (expected csv or pgm)");
}

inline void export_attention(const MeanAttention& m, const std::filesystem::path& path, HeatmapFormat format) {
  try {
    write_text_file_atomic(path, format == HeatmapFormat::CSV ? attention_csv(m) : attention_pgm(m));
  } catch (const std::filesystem::filesystem_error& e) {
    throw IoError(std::string("attention export: ") + e.what());
  }
}

}  // namespace laffi
