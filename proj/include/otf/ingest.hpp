#pragma once

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cstring>
#include <filesystem>
#include <functional>
#include <set>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "otf/image.hpp"

namespace otf {

struct IngestError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Polls a directory for *.png / *.pgm files, delivering them in modification
// order (name breaks ties). Each file is delivered once.
class DirectoryWatcher {
 public:
  explicit DirectoryWatcher(std::string dir) : dir_(std::move(dir)) {
    if (!std::filesystem::is_directory(dir_))
      throw IngestError("not a directory: " + dir_);
  }

  // One scan; returns paths not seen before, ordered by (mtime, name).
  std::vector<std::string> poll() {
    namespace fs = std::filesystem;
    std::vector<std::pair<fs::file_time_type, std::string>> fresh;
    for (const auto& entry : fs::directory_iterator(dir_)) {
      if (!entry.is_regular_file()) continue;
      const std::string ext = entry.path().extension().string();
      if (ext != ".png" && ext != ".pgm") continue;
      const std::string path = entry.path().string();
      if (seen_.count(path)) continue;
      fresh.emplace_back(entry.last_write_time(), path);
    }
    std::sort(fresh.begin(), fresh.end());
    std::vector<std::string> out;
    for (auto& [t, p] : fresh) {
      seen_.insert(p);
      out.push_back(std::move(p));
    }
    return out;
  }

  // Polls every `interval` until `idle_limit` passes without a new file.
  void run(const std::function<void(const std::string&)>& on_file,
           std::chrono::milliseconds interval = std::chrono::milliseconds(100),
           std::chrono::milliseconds idle_limit = std::chrono::milliseconds(1000)) {
    auto last_activity = std::chrono::steady_clock::now();
    while (true) {
      const auto batch = poll();
      if (!batch.empty()) {
        for (const auto& p : batch) on_file(p);
        last_activity = std::chrono::steady_clock::now();
      } else {
        if (std::chrono::steady_clock::now() - last_activity > idle_limit) return;
        std::this_thread::sleep_for(interval);
      }
    }
  }

 private:
  std::string dir_;
  std::set<std::string> seen_;
};

namespace ingest_detail {

inline void readExact(int fd, void* buf, size_t n) {
  auto* p = static_cast<char*>(buf);
  while (n > 0) {
    const ssize_t got = ::read(fd, p, n);
    if (got == 0) throw IngestError("connection closed mid-frame");
    if (got < 0) throw IngestError(std::string("read failed: ") + std::strerror(errno));
    p += got;
    n -= size_t(got);
  }
}

inline void writeExact(int fd, const void* buf, size_t n) {
  const auto* p = static_cast<const char*>(buf);
  while (n > 0) {
    const ssize_t put = ::write(fd, p, n);
    if (put <= 0) throw IngestError(std::string("write failed: ") + std::strerror(errno));
    p += put;
    n -= size_t(put);
  }
}

}  // namespace ingest_detail

// Wire format, little-endian: "OTFI", u32 name length, name bytes, u32 payload
// length, payload (PNG or PGM bytes). Frames repeat until the peer closes.
constexpr char kFrameMagic[4] = {'O', 'T', 'F', 'I'};
constexpr uint32_t kMaxFrameBytes = 256u * 1024u * 1024u;

inline void sendFrame(int fd, const std::string& name, const std::vector<uint8_t>& payload) {
  ingest_detail::writeExact(fd, kFrameMagic, 4);
  const uint32_t name_len = uint32_t(name.size());
  ingest_detail::writeExact(fd, &name_len, 4);
  ingest_detail::writeExact(fd, name.data(), name.size());
  const uint32_t payload_len = uint32_t(payload.size());
  ingest_detail::writeExact(fd, &payload_len, 4);
  ingest_detail::writeExact(fd, payload.data(), payload.size());
}

// Reads one frame; returns false on clean end-of-stream at a frame boundary.
inline bool receiveFrame(int fd, std::string* name, std::vector<uint8_t>* payload) {
  char magic[4];
  {
    const ssize_t got = ::read(fd, magic, 1);
    if (got == 0) return false;
    if (got < 0) throw IngestError(std::string("read failed: ") + std::strerror(errno));
  }
  ingest_detail::readExact(fd, magic + 1, 3);
  if (std::memcmp(magic, kFrameMagic, 4) != 0) throw IngestError("bad frame magic");
  uint32_t name_len = 0, payload_len = 0;
  ingest_detail::readExact(fd, &name_len, 4);
  if (name_len > 4096) throw IngestError("frame name too long");
  name->resize(name_len);
  if (name_len) ingest_detail::readExact(fd, name->data(), name_len);
  ingest_detail::readExact(fd, &payload_len, 4);
  if (payload_len > kMaxFrameBytes) throw IngestError("frame payload too large");
  payload->resize(payload_len);
  if (payload_len) ingest_detail::readExact(fd, payload->data(), payload_len);
  return true;
}

// Listens on `port`, accepts a single connection, and feeds frames to the
// callback until the peer closes. Returns the number of frames received.
// Pass port 0 to let the OS pick; `bound_port` reports the actual one before
// accept() blocks.
inline int serveFrames(uint16_t port,
                       const std::function<void(const std::string&, std::vector<uint8_t>)>& on_frame,
                       const std::function<void(uint16_t)>& bound_port = {}) {
  const int listener = ::socket(AF_INET, SOCK_STREAM, 0);
  if (listener < 0) throw IngestError("socket() failed");
  const int one = 1;
  ::setsockopt(listener, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  addr.sin_port = htons(port);
  if (::bind(listener, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) < 0) {
    ::close(listener);
    throw IngestError(std::string("bind failed: ") + std::strerror(errno));
  }
  if (::listen(listener, 1) < 0) {
    ::close(listener);
    throw IngestError("listen failed");
  }
  if (bound_port) {
    sockaddr_in actual{};
    socklen_t len = sizeof(actual);
    ::getsockname(listener, reinterpret_cast<sockaddr*>(&actual), &len);
    bound_port(ntohs(actual.sin_port));
  }
  const int conn = ::accept(listener, nullptr, nullptr);
  ::close(listener);
  if (conn < 0) throw IngestError("accept failed");
  int count = 0;
  try {
    std::string name;
    std::vector<uint8_t> payload;
    while (receiveFrame(conn, &name, &payload)) {
      on_frame(name, std::move(payload));
      payload.clear();
      ++count;
    }
  } catch (...) {
    ::close(conn);
    throw;
  }
  ::close(conn);
  return count;
}

inline int connectTo(const std::string& host, uint16_t port) {
  const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  if (fd < 0) throw IngestError("socket() failed");
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(port);
  if (::inet_pton(AF_INET, host == "localhost" ? "127.0.0.1" : host.c_str(), &addr.sin_addr) != 1) {
    ::close(fd);
    throw IngestError("bad host: " + host);
  }
  if (::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) < 0) {
    ::close(fd);
    throw IngestError(std::string("connect failed: ") + std::strerror(errno));
  }
  return fd;
}

}  // namespace otf
