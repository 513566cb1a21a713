#pragma once

// Versioned plain-text container used for checkpoints, trained models and
// datasets:
//
//   #pcgan <kind> v<version>
//   <key> <value>                    header lines
//   @doubles <name> <count>          64-bit floats as 16 hex digits,
//   <hex> <hex> ...                  eight per line
//   @text <name> <lines>             verbatim text lines
//   ...
//   @end
//
// Floats are stored as their IEEE-754 bit patterns, so a save/load round
// trip is exact.

#include "error.hpp"

#include <bit>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace pcgan {

inline std::string
to_hex(double v)
{
  char buf[17];
  auto bits = std::bit_cast<std::uint64_t>(v);
  static const char* digits = "0123456789abcdef";
  for (int i = 15; i >= 0; --i) {
    buf[i] = digits[bits & 0xf];
    bits >>= 4;
  }
  buf[16] = '\0';
  return buf;
}

inline double
from_hex(std::string_view s)
{
  std::uint64_t bits = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), bits, 16);
  if (ec != std::errc() || ptr != s.data() + s.size() || s.size() != 16)
    throw UsageError("malformed hex float '" + std::string(s) + "'");
  return std::bit_cast<double>(bits);
}

inline std::string
hash_hex(std::uint64_t h)
{
  char buf[17];
  static const char* digits = "0123456789abcdef";
  for (int i = 15; i >= 0; --i) {
    buf[i] = digits[h & 0xf];
    h >>= 4;
  }
  buf[16] = '\0';
  return buf;
}

class Artifact
{
public:
  std::string kind;
  int version = 1;

  Artifact() = default;
  Artifact(std::string kind_, int version_ = 1)
    : kind(std::move(kind_))
    , version(version_)
  {}

  void set(const std::string& key, const std::string& value)
  {
    for (auto& [k, v] : header_)
      if (k == key) {
        v = value;
        return;
      }
    header_.emplace_back(key, value);
  }

  bool has(const std::string& key) const
  {
    for (const auto& kv : header_)
      if (kv.first == key)
        return true;
    return false;
  }

  const std::string& get(const std::string& key) const
  {
    for (const auto& [k, v] : header_)
      if (k == key)
        return v;
    throw UsageError(kind + " artifact: missing header '" + key + "'");
  }

  void put_doubles(const std::string& name, std::vector<double> values)
  {
    doubles_.emplace_back(name, std::move(values));
  }

  const std::vector<double>& doubles(const std::string& name) const
  {
    for (const auto& [k, v] : doubles_)
      if (k == name)
        return v;
    throw UsageError(kind + " artifact: missing block '" + name + "'");
  }

  void put_text(const std::string& name, std::vector<std::string> lines)
  {
    texts_.emplace_back(name, std::move(lines));
  }

  const std::vector<std::string>& text(const std::string& name) const
  {
    for (const auto& [k, v] : texts_)
      if (k == name)
        return v;
    throw UsageError(kind + " artifact: missing text '" + name + "'");
  }

  std::string serialize() const
  {
    std::ostringstream os;
    os << "#pcgan " << kind << " v" << version << '\n';
    for (const auto& [k, v] : header_)
      os << k << ' ' << v << '\n';
    for (const auto& [name, vals] : doubles_) {
      os << "@doubles " << name << ' ' << vals.size() << '\n';
      for (std::size_t i = 0; i < vals.size(); ++i) {
        os << to_hex(vals[i]);
        os << ((i % 8 == 7 || i + 1 == vals.size()) ? '\n' : ' ');
      }
    }
    for (const auto& [name, lines] : texts_) {
      os << "@text " << name << ' ' << lines.size() << '\n';
      for (const auto& l : lines)
        os << l << '\n';
    }
    os << "@end\n";
    return os.str();
  }

  static Artifact parse(std::istream& is, const std::string& expected_kind)
  {
    std::string line;
    if (!std::getline(is, line))
      throw UsageError("empty artifact file");
    std::istringstream first(line);
    std::string magic, kind, ver;
    first >> magic >> kind >> ver;
    if (magic != "#pcgan" || ver.size() < 2 || ver[0] != 'v')
      throw UsageError("not a pcgan artifact");
    if (kind != expected_kind)
      throw UsageError("expected a '" + expected_kind + "' artifact, found '" +
                       kind + "'");
    Artifact a(kind, std::stoi(ver.substr(1)));
    bool ended = false;
    while (std::getline(is, line)) {
      if (line == "@end") {
        ended = true;
        break;
      }
      if (line.rfind("@doubles ", 0) == 0) {
        std::istringstream ls(line.substr(9));
        std::string name;
        std::size_t count = 0;
        if (!(ls >> name >> count))
          throw UsageError("malformed block header '" + line + "'");
        std::vector<double> vals;
        vals.reserve(count);
        std::string tok;
        while (vals.size() < count && is >> tok)
          vals.push_back(from_hex(tok));
        if (vals.size() != count)
          throw UsageError("truncated block '" + name + "'");
        std::getline(is, line);
        a.doubles_.emplace_back(name, std::move(vals));
      } else if (line.rfind("@text ", 0) == 0) {
        std::istringstream ls(line.substr(6));
        std::string name;
        std::size_t count = 0;
        if (!(ls >> name >> count))
          throw UsageError("malformed text header '" + line + "'");
        std::vector<std::string> lines(count);
        for (auto& l : lines)
          if (!std::getline(is, l))
            throw UsageError("truncated text '" + name + "'");
        a.texts_.emplace_back(name, std::move(lines));
      } else {
        auto sp = line.find(' ');
        if (sp == std::string::npos)
          throw UsageError("malformed header line '" + line + "'");
        a.header_.emplace_back(line.substr(0, sp), line.substr(sp + 1));
      }
    }
    if (!ended)
      throw UsageError("artifact is truncated (no @end)");
    return a;
  }

private:
  std::vector<std::pair<std::string, std::string>> header_;
  std::vector<std::pair<std::string, std::vector<double>>> doubles_;
  std::vector<std::pair<std::string, std::vector<std::string>>> texts_;
};

//! Writes to a sibling temporary file and renames it over `path`.
inline void
write_atomic(const std::filesystem::path& path, const std::string& content)
{
  if (path.has_parent_path())
    std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os)
      throw UsageError("cannot write " + tmp.string());
    os << content;
    os.flush();
    if (!os)
      throw UsageError("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline std::string
read_file(const std::filesystem::path& path)
{
  std::ifstream is(path, std::ios::binary);
  if (!is)
    throw UsageError("cannot read " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

inline Artifact
load_artifact(const std::filesystem::path& path, const std::string& kind)
{
  std::istringstream is(read_file(path));
  return Artifact::parse(is, kind);
}

} // namespace pcgan
