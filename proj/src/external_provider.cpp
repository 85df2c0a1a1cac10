#include <fcntl.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <atomic>
#include <cerrno>
#include <cstring>
#include <fstream>

#include "defloc/errors.hpp"
#include "defloc/features.hpp"

namespace defloc {
namespace {

std::atomic<std::uint64_t> g_scratch_counter{0};

}  // namespace

ExternalProcessExtractor::ExternalProcessExtractor(std::string command,
                                                   std::filesystem::path cache_dir)
    : command_(std::move(command)), cache_dir_(std::move(cache_dir)) {
  // A provider that exits early must not kill us with SIGPIPE.
  ::signal(SIGPIPE, SIG_IGN);
  int in_pipe[2];
  int out_pipe[2];
  if (::pipe(in_pipe) != 0 || ::pipe(out_pipe) != 0) {
    throw IoError("external provider: pipe() failed: " + std::string(std::strerror(errno)));
  }
  pid_ = ::fork();
  if (pid_ < 0) throw IoError("external provider: fork() failed");
  if (pid_ == 0) {
    ::dup2(in_pipe[0], STDIN_FILENO);
    ::dup2(out_pipe[1], STDOUT_FILENO);
    ::close(in_pipe[0]);
    ::close(in_pipe[1]);
    ::close(out_pipe[0]);
    ::close(out_pipe[1]);
    ::execl("/bin/sh", "sh", "-c", command_.c_str(), static_cast<char*>(nullptr));
    ::_exit(127);
  }
  ::close(in_pipe[0]);
  ::close(out_pipe[1]);
  to_child_ = in_pipe[1];
  from_child_ = out_pipe[0];
  ::fcntl(to_child_, F_SETFD, FD_CLOEXEC);
  ::fcntl(from_child_, F_SETFD, FD_CLOEXEC);

  std::string hello;
  try {
    hello = read_line();
  } catch (const IoError&) {
    shutdown();
    throw IoError("external provider '" + command_ + "' exited before its DIM handshake");
  }
  if (hello.rfind("DIM ", 0) != 0 || std::atoi(hello.c_str() + 4) <= 0) {
    shutdown();
    throw FormatError("external provider handshake: expected 'DIM <n>', got '" + hello + "'");
  }
  dim_ = std::atoi(hello.c_str() + 4);

  scratch_dir_ = std::filesystem::temp_directory_path() /
                 ("defloc-embed-" + std::to_string(::getpid()) + "-" +
                  std::to_string(g_scratch_counter++));
  std::filesystem::create_directories(scratch_dir_);
  if (!cache_dir_.empty()) std::filesystem::create_directories(cache_dir_);
}

ExternalProcessExtractor::~ExternalProcessExtractor() { shutdown(); }

void ExternalProcessExtractor::shutdown() noexcept {
  if (to_child_ >= 0) {
    static constexpr char kQuit[] = "QUIT\n";
    [[maybe_unused]] auto n = ::write(to_child_, kQuit, sizeof(kQuit) - 1);
    ::close(to_child_);
    to_child_ = -1;
  }
  if (from_child_ >= 0) {
    ::close(from_child_);
    from_child_ = -1;
  }
  if (pid_ > 0) {
    int status = 0;
    ::waitpid(pid_, &status, 0);
    pid_ = -1;
  }
  if (!scratch_dir_.empty()) {
    std::error_code ec;
    std::filesystem::remove_all(scratch_dir_, ec);
  }
}

std::string ExternalProcessExtractor::read_line() const {
  while (true) {
    const auto nl = buffer_.find('\n');
    if (nl != std::string::npos) {
      std::string line = buffer_.substr(0, nl);
      buffer_.erase(0, nl + 1);
      if (!line.empty() && line.back() == '\r') line.pop_back();
      return line;
    }
    char chunk[65536];
    const ssize_t n = ::read(from_child_, chunk, sizeof(chunk));
    if (n < 0 && errno == EINTR) continue;
    if (n <= 0) throw IoError("external provider '" + command_ + "' closed its output");
    buffer_.append(chunk, static_cast<std::size_t>(n));
  }
}

void ExternalProcessExtractor::write_line(const std::string& line) const {
  const std::string msg = line + "\n";
  std::size_t off = 0;
  while (off < msg.size()) {
    const ssize_t n = ::write(to_child_, msg.data() + off, msg.size() - off);
    if (n < 0 && errno == EINTR) continue;
    if (n <= 0) throw IoError("external provider '" + command_ + "' stopped reading requests");
    off += static_cast<std::size_t>(n);
  }
}

nlohmann::json ExternalProcessExtractor::metadata() const {
  nlohmann::json j = {{"name", name()}, {"dim", dim_}, {"command", command_}, {"mode", "process"}};
  if (!cache_dir_.empty()) j["cache_dir"] = cache_dir_.string();
  return j;
}

std::vector<double> ExternalProcessExtractor::compute(const GrayImage& state) const {
  std::lock_guard<std::mutex> lock(mutex_);
  const auto png = scratch_dir_ / ("crop-" + std::to_string(requests_++) + ".png");
  write_png(state, png);
  write_line("EMBED " + png.string());
  std::vector<double> v = parse_vector_line(read_line());
  std::error_code ec;
  std::filesystem::remove(png, ec);
  if (static_cast<int>(v.size()) != dim_) {
    throw FormatError("external provider replied with " + std::to_string(v.size()) +
                      " values, handshake declared " + std::to_string(dim_));
  }
  if (!cache_dir_.empty()) {
    std::ofstream out(cache_dir_ / (content_hash(state) + ".vec"), std::ios::trunc);
    out.precision(17);
    for (std::size_t i = 0; i < v.size(); ++i) out << (i ? " " : "") << v[i];
    out << '\n';
  }
  return v;
}

}  // namespace defloc
