#ifndef CTL_COMMON_HPP_
#define CTL_COMMON_HPP_

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace ctl {

using Json = nlohmann::json;

// Error categories map onto CLI exit codes (config=2, data=3, stage=4).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ParseError : public DataError {
 public:
  ParseError(const std::string& source, std::size_t line, const std::string& what)
      : DataError(source + ":" + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

class DuplicateError : public DataError {
 public:
  using DataError::DataError;
};

class IntegrityError : public DataError {
 public:
  using DataError::DataError;
};

class StageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Dates. Files carry ISO-8601 strings; internally a timestamp is seconds since
// the Unix epoch and a day index is floor(seconds / 86400).

using DayIndex = std::int64_t;
using Timestamp = std::int64_t;

// Accepts "YYYY-MM-DD", "YYYY-MM-DDTHH:MM", "YYYY-MM-DDTHH:MM:SS" with an
// optional trailing 'Z'. A space may replace 'T'.
Timestamp ParseTimestamp(std::string_view iso);
DayIndex ParseDate(std::string_view iso);
std::string FormatTimestamp(Timestamp ts);
std::string FormatDate(DayIndex day);
inline DayIndex DayOf(Timestamp ts) {
  return ts >= 0 ? ts / 86400 : -((-ts + 86399) / 86400);
}
// Whole years elapsed between two days (birthday arithmetic).
int YearsBetween(DayIndex birth, DayIndex when);

// ---------------------------------------------------------------------------
// Artifact files: the first line is "#schema <name>/<version>", followed by one
// JSON record per line.

struct SchemaTag {
  std::string name;
  int version = 1;
};

class RecordWriter {
 public:
  RecordWriter(const std::filesystem::path& path, const SchemaTag& schema);
  void Write(const Json& record);
  void WriteLine(std::string_view raw);
  void Close();

 private:
  std::filesystem::path path_;
  std::ofstream out_;
};

struct Record {
  std::size_t line = 0;
  Json value;
};

// Reads every record of an artifact file. An empty file yields no records.
// A present but mismatched schema line is refused.
std::vector<Record> ReadRecords(const std::filesystem::path& path,
                                const SchemaTag& schema);
// Same, for raw (non-JSON) lines after the schema line.
std::vector<std::pair<std::size_t, std::string>> ReadRawLines(
    const std::filesystem::path& path, const SchemaTag& schema);

std::string SchemaLine(const SchemaTag& schema);

// ---------------------------------------------------------------------------
// Hashing (SHA-256, hex).

std::string Sha256Hex(std::string_view data);
std::string Sha256File(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Logging: one JSON object per line on stderr.

enum class LogLevel { kDebug, kInfo, kWarn, kError };
void SetLogLevel(LogLevel level);
void Log(LogLevel level, std::string_view stage, std::string_view message,
         std::string_view patient_id = {});

// ---------------------------------------------------------------------------
// Deterministic random numbers. Distributions are implemented here rather than
// with <random> distributions so streams are identical across standard
// library implementations.

class Rng {
 public:
  explicit Rng(std::uint64_t seed);
  std::uint64_t NextU64();
  double Uniform();                       // [0, 1)
  std::int64_t UniformInt(std::int64_t lo, std::int64_t hi);  // inclusive
  double Normal(double mean, double stddev);
  bool Bernoulli(double p) { return Uniform() < p; }
  template <typename T>
  void Shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      auto j = static_cast<std::size_t>(UniformInt(0, static_cast<std::int64_t>(i) - 1));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::uint64_t state_[4];
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// Runs fn(i) for i in [0, n) on up to `jobs` threads (jobs <= 1 runs inline).
void ParallelFor(std::size_t n, int jobs, const std::function<void(std::size_t)>& fn);

// Writes `contents` atomically (via a temporary file and rename).
void WriteFileAtomic(const std::filesystem::path& path, std::string_view contents);
std::string ReadFile(const std::filesystem::path& path);

}  // namespace ctl

#endif  // CTL_COMMON_HPP_
