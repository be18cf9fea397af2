#pragma once

// Line-oriented text formats.
//
// Lattice (one per file):
//   LAT <num_frames> <num_nodes>
//   ARC <from> <to> <state_id> <lm_logscore>     (one per arc)
//   REF <s_0> ... <s_{T-1}>
//
// Frames:
//   FRAMES <num_frames> <dim>
//   <label> <f_1> ... <f_dim>                     (one per frame)
//
// Blank lines and lines starting with '#' are ignored. Floats are written
// with 17 significant digits so files round-trip exactly.

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <istream>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "hdnn/errors.hpp"
#include "hdnn/lattice.hpp"
#include "hdnn/training.hpp"

namespace hdnn {

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

namespace detail {

class LineReader {
 public:
  explicit LineReader(std::istream& in) : in_(in) {}

  /// Next non-empty, non-comment line split into tokens; nullopt at EOF.
  std::optional<std::vector<std::string>> next() {
    std::string line;
    while (std::getline(in_, line)) {
      ++line_no_;
      std::istringstream ss(line);
      std::vector<std::string> tokens;
      for (std::string tok; ss >> tok;) tokens.push_back(tok);
      if (tokens.empty() || tokens.front().front() == '#') continue;
      return tokens;
    }
    return std::nullopt;
  }

  std::size_t line() const { return line_no_; }

  [[noreturn]] void fail(const std::string& what) const { throw FormatError(what, line_no_); }

  std::size_t to_index(const std::string& s) const {
    std::size_t v = 0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size()) fail("expected a nonnegative integer, got '" + s + "'");
    return v;
  }

  double to_double(const std::string& s) const {
    try {
      std::size_t used = 0;
      const double v = std::stod(s, &used);
      if (used != s.size()) throw std::invalid_argument(s);
      return v;
    } catch (const std::exception&) {
      fail("expected a number, got '" + s + "'");
    }
  }

 private:
  std::istream& in_;
  std::size_t line_no_ = 0;
};

}  // namespace detail

struct LatticeFile {
  Lattice lattice;
  ReferencePath reference;
};

/// Parses one lattice. Format errors report the 1-based line number as offset.
inline LatticeFile read_lattice(std::istream& in) {
  detail::LineReader reader(in);
  auto header = reader.next();
  if (!header || header->size() != 3 || (*header)[0] != "LAT") reader.fail("expected 'LAT <num_frames> <num_nodes>'");
  const std::size_t frames = reader.to_index((*header)[1]);
  const std::size_t nodes = reader.to_index((*header)[2]);
  std::vector<LatticeArc> arcs;
  std::optional<ReferencePath> reference;
  while (auto tokens = reader.next()) {
    const auto& t = *tokens;
    if (t[0] == "ARC") {
      if (t.size() != 5) reader.fail("expected 'ARC <from> <to> <state_id> <lm_logscore>'");
      arcs.push_back({reader.to_index(t[1]), reader.to_index(t[2]), reader.to_index(t[3]), reader.to_double(t[4])});
    } else if (t[0] == "REF") {
      if (reference) reader.fail("duplicate REF line");
      reference.emplace();
      for (std::size_t i = 1; i < t.size(); ++i) reference->push_back(reader.to_index(t[i]));
    } else {
      reader.fail("unknown record '" + t[0] + "'");
    }
  }
  if (!reference) reader.fail("missing REF line");
  if (reference->size() != frames) reader.fail("REF length differs from num_frames");
  try {
    return {Lattice(frames, nodes, std::move(arcs)), std::move(*reference)};
  } catch (const StructuralError& e) {
    throw FormatError(e.what(), reader.line());
  }
}

inline void write_lattice(std::ostream& out, const Lattice& lat, const ReferencePath& reference) {
  out << "LAT " << lat.num_frames() << ' ' << lat.num_nodes() << '\n';
  for (const auto& a : lat.arcs()) {
    out << "ARC " << a.from << ' ' << a.to << ' ' << a.state << ' ' << format_double(a.lm_logscore) << '\n';
  }
  out << "REF";
  for (std::size_t s : reference) out << ' ' << s;
  out << '\n';
}

inline FrameData read_frames(std::istream& in) {
  detail::LineReader reader(in);
  auto header = reader.next();
  if (!header || header->size() != 3 || (*header)[0] != "FRAMES") reader.fail("expected 'FRAMES <count> <dim>'");
  const std::size_t count = reader.to_index((*header)[1]);
  const std::size_t dim = reader.to_index((*header)[2]);
  if (dim == 0) reader.fail("feature dimension must be positive");
  FrameData data{Matrix(count, dim), std::vector<std::size_t>(count)};
  for (std::size_t r = 0; r < count; ++r) {
    auto tokens = reader.next();
    if (!tokens) reader.fail("expected " + std::to_string(count) + " frames, found " + std::to_string(r));
    if (tokens->size() != dim + 1) reader.fail("frame line needs a label and " + std::to_string(dim) + " values");
    data.labels[r] = reader.to_index((*tokens)[0]);
    for (std::size_t d = 0; d < dim; ++d) data.features(r, d) = reader.to_double((*tokens)[d + 1]);
  }
  if (reader.next()) reader.fail("unexpected content after the last frame");
  return data;
}

inline void write_frames(std::ostream& out, const FrameData& data) {
  out << "FRAMES " << data.size() << ' ' << data.features.cols() << '\n';
  for (std::size_t r = 0; r < data.size(); ++r) {
    out << data.labels[r];
    for (double v : data.features.row(r)) out << ' ' << format_double(v);
    out << '\n';
  }
}

template <class F>
auto with_input_file(const std::filesystem::path& path, F&& f) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  return f(in);
}

template <class F>
void with_output_file(const std::filesystem::path& path, F&& f) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  f(out);
  if (!out) throw Error("failed writing " + path.string());
}

inline FrameData load_frames(const std::filesystem::path& path) {
  return with_input_file(path, [](std::istream& in) { return read_frames(in); });
}

inline LatticeFile load_lattice(const std::filesystem::path& path) {
  return with_input_file(path, [](std::istream& in) { return read_lattice(in); });
}

/// Splits a frame file into consecutive utterances, one per lattice, in order.
/// Each lattice's reference must match the labels of its frames.
inline std::vector<Utterance> assemble_utterances(const FrameData& frames, std::vector<LatticeFile> lattices) {
  std::vector<Utterance> out;
  std::size_t offset = 0;
  for (auto& lf : lattices) {
    const std::size_t n = lf.lattice.num_frames();
    if (offset + n > frames.size()) throw ConsistencyError("lattices cover more frames than the frame file holds");
    for (std::size_t t = 0; t < n; ++t) {
      if (frames.labels[offset + t] != lf.reference[t]) {
        throw ConsistencyError("lattice reference disagrees with frame label at frame " + std::to_string(offset + t));
      }
    }
    out.push_back({row_slice(frames.features, offset, n), std::move(lf.reference), std::move(lf.lattice)});
    offset += n;
  }
  if (offset != frames.size()) throw ConsistencyError("lattices do not cover every frame");
  return out;
}

}  // namespace hdnn
