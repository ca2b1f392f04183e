#include "ctl/common.hpp"

#include <openssl/evp.h>

#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <mutex>
#include <sstream>
#include <thread>

namespace ctl {

namespace {

int ParseFixedInt(std::string_view s, std::size_t pos, std::size_t len, bool* ok) {
  int v = 0;
  if (pos + len > s.size()) {
    *ok = false;
    return 0;
  }
  auto res = std::from_chars(s.data() + pos, s.data() + pos + len, v);
  if (res.ec != std::errc{} || res.ptr != s.data() + pos + len) *ok = false;
  return v;
}

}  // namespace

Timestamp ParseTimestamp(std::string_view iso) {
  using namespace std::chrono;
  while (!iso.empty() && (iso.back() == 'Z' || iso.back() == 'z')) iso.remove_suffix(1);
  bool ok = iso.size() >= 10 && iso[4] == '-' && iso[7] == '-';
  const int y = ParseFixedInt(iso, 0, 4, &ok);
  const int mo = ParseFixedInt(iso, 5, 2, &ok);
  const int d = ParseFixedInt(iso, 8, 2, &ok);
  int hh = 0, mm = 0, ss = 0;
  if (ok && iso.size() > 10) {
    ok = (iso[10] == 'T' || iso[10] == ' ') && iso.size() >= 16 && iso[13] == ':';
    hh = ParseFixedInt(iso, 11, 2, &ok);
    mm = ParseFixedInt(iso, 14, 2, &ok);
    if (ok && iso.size() > 16) {
      ok = iso.size() == 19 && iso[16] == ':';
      ss = ParseFixedInt(iso, 17, 2, &ok);
    }
  }
  if (!ok) throw DataError("invalid ISO-8601 date-time '" + std::string(iso) + "'");
  const year_month_day ymd{year{y}, month{static_cast<unsigned>(mo)},
                           day{static_cast<unsigned>(d)}};
  if (!ymd.ok() || hh > 23 || mm > 59 || ss > 60) {
    throw DataError("out-of-range date-time '" + std::string(iso) + "'");
  }
  const auto days = sys_days{ymd}.time_since_epoch().count();
  return static_cast<Timestamp>(days) * 86400 + hh * 3600 + mm * 60 + ss;
}

DayIndex ParseDate(std::string_view iso) { return DayOf(ParseTimestamp(iso)); }

std::string FormatDate(DayIndex day) {
  using namespace std::chrono;
  const year_month_day ymd{sys_days{days{day}}};
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%04d-%02u-%02u", static_cast<int>(ymd.year()),
                static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()));
  return buf;
}

std::string FormatTimestamp(Timestamp ts) {
  const DayIndex day = DayOf(ts);
  const std::int64_t secs = ts - day * 86400;
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%sT%02d:%02d:%02dZ", FormatDate(day).c_str(),
                static_cast<int>(secs / 3600), static_cast<int>((secs / 60) % 60),
                static_cast<int>(secs % 60));
  return buf;
}

int YearsBetween(DayIndex birth, DayIndex when) {
  using namespace std::chrono;
  const year_month_day b{sys_days{days{birth}}};
  const year_month_day w{sys_days{days{when}}};
  int years = static_cast<int>(w.year()) - static_cast<int>(b.year());
  if (w.month() < b.month() || (w.month() == b.month() && w.day() < b.day())) --years;
  return years;
}

// ---------------------------------------------------------------------------

std::string SchemaLine(const SchemaTag& schema) {
  return "#schema " + schema.name + "/" + std::to_string(schema.version);
}

RecordWriter::RecordWriter(const std::filesystem::path& path, const SchemaTag& schema)
    : path_(path), out_(path, std::ios::binary | std::ios::trunc) {
  if (!out_) throw DataError("cannot open '" + path.string() + "' for writing");
  out_ << SchemaLine(schema) << '\n';
}

void RecordWriter::Write(const Json& record) { out_ << record.dump() << '\n'; }

void RecordWriter::WriteLine(std::string_view raw) { out_ << raw << '\n'; }

void RecordWriter::Close() {
  out_.close();
  if (!out_) throw DataError("failed writing '" + path_.string() + "'");
}

std::vector<std::pair<std::size_t, std::string>> ReadRawLines(
    const std::filesystem::path& path, const SchemaTag& schema) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  std::vector<std::pair<std::size_t, std::string>> lines;
  std::string line;
  std::size_t n = 0;
  bool first = true;
  while (std::getline(in, line)) {
    ++n;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (first) {
      first = false;
      if (line.rfind("#schema ", 0) == 0) {
        if (line != SchemaLine(schema)) {
          throw ParseError(path.string(), n,
                           "schema mismatch: expected '" + SchemaLine(schema) +
                               "', found '" + line + "'");
        }
        continue;
      }
      if (!line.empty()) {
        throw ParseError(path.string(), n,
                         "missing schema line '" + SchemaLine(schema) + "'");
      }
    }
    if (line.empty()) continue;
    lines.emplace_back(n, std::move(line));
  }
  return lines;
}

std::vector<Record> ReadRecords(const std::filesystem::path& path, const SchemaTag& schema) {
  std::vector<Record> records;
  for (auto& [n, line] : ReadRawLines(path, schema)) {
    Record r;
    r.line = n;
    try {
      r.value = Json::parse(line);
    } catch (const Json::parse_error& e) {
      throw ParseError(path.string(), n, std::string("malformed JSON: ") + e.what());
    }
    if (!r.value.is_object()) throw ParseError(path.string(), n, "record is not an object");
    records.push_back(std::move(r));
  }
  return records;
}

// ---------------------------------------------------------------------------

std::string Sha256Hex(std::string_view data) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_Digest(data.data(), data.size(), digest, &len, EVP_sha256(), nullptr);
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(len * 2);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(kHex[digest[i] >> 4]);
    out.push_back(kHex[digest[i] & 0xF]);
  }
  return out;
}

std::string ReadFile(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string Sha256File(const std::filesystem::path& path) { return Sha256Hex(ReadFile(path)); }

void ParallelFor(std::size_t n, int jobs, const std::function<void(std::size_t)>& fn) {
  if (jobs <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mu;
  std::vector<std::thread> workers;
  const auto n_workers = std::min<std::size_t>(static_cast<std::size_t>(jobs), n);
  for (std::size_t w = 0; w < n_workers; ++w) {
    workers.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mu);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : workers) t.join();
  if (error) std::rethrow_exception(error);
}

void WriteFileAtomic(const std::filesystem::path& path, std::string_view contents) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot open '" + tmp + "' for writing");
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw DataError("failed writing '" + tmp + "'");
  }
  std::filesystem::rename(tmp, path);
}

// ---------------------------------------------------------------------------

namespace {
std::atomic<LogLevel> g_level{LogLevel::kInfo};
std::mutex g_log_mu;

const char* LevelName(LogLevel l) {
  switch (l) {
    case LogLevel::kDebug: return "debug";
    case LogLevel::kInfo: return "info";
    case LogLevel::kWarn: return "warn";
    case LogLevel::kError: return "error";
  }
  return "info";
}
}  // namespace

void SetLogLevel(LogLevel level) { g_level = level; }

void Log(LogLevel level, std::string_view stage, std::string_view message,
         std::string_view patient_id) {
  if (level < g_level.load()) return;
  Json j;
  j["level"] = LevelName(level);
  j["stage"] = stage;
  if (!patient_id.empty()) j["patient_id"] = patient_id;
  j["msg"] = message;
  std::lock_guard<std::mutex> lock(g_log_mu);
  std::cerr << j.dump() << '\n';
}

// ---------------------------------------------------------------------------
// xoshiro256** seeded through splitmix64.

namespace {
std::uint64_t SplitMix64(std::uint64_t& x) {
  std::uint64_t z = (x += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}
std::uint64_t Rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
}  // namespace

Rng::Rng(std::uint64_t seed) {
  for (auto& s : state_) s = SplitMix64(seed);
}

std::uint64_t Rng::NextU64() {
  const std::uint64_t result = Rotl(state_[1] * 5, 7) * 9;
  const std::uint64_t t = state_[1] << 17;
  state_[2] ^= state_[0];
  state_[3] ^= state_[1];
  state_[1] ^= state_[2];
  state_[0] ^= state_[3];
  state_[2] ^= t;
  state_[3] = Rotl(state_[3], 45);
  return result;
}

double Rng::Uniform() { return static_cast<double>(NextU64() >> 11) * 0x1.0p-53; }

std::int64_t Rng::UniformInt(std::int64_t lo, std::int64_t hi) {
  if (hi <= lo) return lo;
  const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
  // Rejection sampling keeps the result unbiased.
  const std::uint64_t limit = UINT64_MAX - (UINT64_MAX % span);
  std::uint64_t x;
  do {
    x = NextU64();
  } while (x >= limit);
  return lo + static_cast<std::int64_t>(x % span);
}

double Rng::Normal(double mean, double stddev) {
  if (has_spare_) {
    has_spare_ = false;
    return mean + stddev * spare_;
  }
  double u1;
  do {
    u1 = Uniform();
  } while (u1 <= 0.0);
  const double u2 = Uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * M_PI * u2;
  spare_ = r * std::sin(theta);
  has_spare_ = true;
  return mean + stddev * r * std::cos(theta);
}

}  // namespace ctl
