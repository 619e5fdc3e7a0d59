#pragma once

// Child process with line-oriented pipes on stdin/stdout (POSIX only).

#include <fcntl.h>
#include <poll.h>
#include <signal.h>
#include <spawn.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <chrono>
#include <cstring>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "srpl/error.hpp"

extern char** environ;

namespace srpl {

class Subprocess {
public:
    static constexpr std::size_t kMaxLine = 1 << 20;

    /// Runs `argv` directly; use shell() for a command string.
    explicit Subprocess(const std::vector<std::string>& argv, const std::filesystem::path& cwd = {}) {
        if (argv.empty()) throw InvalidArgument("Subprocess: empty argv");
        int in_pipe[2], out_pipe[2];
        if (::pipe2(in_pipe, O_CLOEXEC) != 0) throw SegmenterIoError(std::string("pipe: ") + std::strerror(errno));
        if (::pipe2(out_pipe, O_CLOEXEC) != 0) {
            ::close(in_pipe[0]);
            ::close(in_pipe[1]);
            throw SegmenterIoError(std::string("pipe: ") + std::strerror(errno));
        }
        posix_spawn_file_actions_t fa;
        posix_spawn_file_actions_init(&fa);
        posix_spawn_file_actions_adddup2(&fa, in_pipe[0], STDIN_FILENO);
        posix_spawn_file_actions_adddup2(&fa, out_pipe[1], STDOUT_FILENO);
        if (!cwd.empty()) posix_spawn_file_actions_addchdir_np(&fa, cwd.c_str());
        std::vector<char*> args;
        for (const auto& a : argv) args.push_back(const_cast<char*>(a.c_str()));
        args.push_back(nullptr);
        // Own process group, so a kill also reaches anything a shell wrapper forked.
        posix_spawnattr_t attr;
        posix_spawnattr_init(&attr);
        posix_spawnattr_setflags(&attr, POSIX_SPAWN_SETPGROUP);
        posix_spawnattr_setpgroup(&attr, 0);
        const int rc = ::posix_spawnp(&pid_, args[0], &fa, &attr, args.data(), environ);
        posix_spawnattr_destroy(&attr);
        posix_spawn_file_actions_destroy(&fa);
        ::close(in_pipe[0]);
        ::close(out_pipe[1]);
        if (rc != 0) {
            ::close(in_pipe[1]);
            ::close(out_pipe[0]);
            throw SegmenterIoError("cannot start '" + argv[0] + "': " + std::strerror(rc));
        }
        to_child_ = in_pipe[1];
        from_child_ = out_pipe[0];
    }

    static Subprocess shell(const std::string& command, const std::filesystem::path& cwd = {}) {
        return Subprocess({"/bin/sh", "-c", command}, cwd);
    }

    Subprocess(Subprocess&& o) noexcept
        : pid_(o.pid_), to_child_(o.to_child_), from_child_(o.from_child_), buffer_(std::move(o.buffer_)), eof_(o.eof_) {
        o.pid_ = -1;
        o.to_child_ = o.from_child_ = -1;
    }
    Subprocess(const Subprocess&) = delete;
    Subprocess& operator=(const Subprocess&) = delete;
    Subprocess& operator=(Subprocess&&) = delete;

    ~Subprocess() { terminate(); }

    pid_t pid() const { return pid_; }

    /// Writes `line` plus a newline. A child that closed its stdin raises
    /// SegmenterIoError instead of delivering SIGPIPE to this process.
    void write_line(const std::string& line) {
        if (to_child_ < 0) throw SegmenterIoError("child stdin is closed");
        const std::string data = line + "\n";
        sigset_t block, old;
        sigemptyset(&block);
        sigaddset(&block, SIGPIPE);
        pthread_sigmask(SIG_BLOCK, &block, &old);
        std::size_t off = 0;
        int err = 0;
        while (off < data.size()) {
            const ssize_t n = ::write(to_child_, data.data() + off, data.size() - off);
            if (n < 0) {
                if (errno == EINTR) continue;
                err = errno;
                break;
            }
            off += static_cast<std::size_t>(n);
        }
        if (err == EPIPE) {
            const timespec zero{0, 0};
            sigtimedwait(&block, nullptr, &zero);  // drop the pending SIGPIPE
        }
        pthread_sigmask(SIG_SETMASK, &old, nullptr);
        if (err) throw SegmenterIoError(std::string("write to child failed: ") + std::strerror(err));
    }

    /// Next line without its newline; nullopt at EOF. Raises SegmenterTimeout
    /// when no full line arrives within `timeout`.
    std::optional<std::string> read_line(std::chrono::milliseconds timeout) {
        const auto deadline = std::chrono::steady_clock::now() + timeout;
        for (;;) {
            const auto nl = buffer_.find('\n');
            if (nl != std::string::npos) {
                std::string line = buffer_.substr(0, nl);
                buffer_.erase(0, nl + 1);
                if (!line.empty() && line.back() == '\r') line.pop_back();
                return line;
            }
            if (buffer_.size() > kMaxLine) throw SegmenterIoError("child output line exceeds 1 MiB");
            if (eof_) {
                if (buffer_.empty()) return std::nullopt;
                std::string rest = std::move(buffer_);
                buffer_.clear();
                return rest;
            }
            const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
            if (left.count() <= 0) throw SegmenterTimeout("no reply from child within " + std::to_string(timeout.count()) + " ms");
            pollfd pfd{from_child_, POLLIN, 0};
            const int rc = ::poll(&pfd, 1, static_cast<int>(std::min<long long>(left.count(), 1 << 30)));
            if (rc < 0) {
                if (errno == EINTR) continue;
                throw SegmenterIoError(std::string("poll: ") + std::strerror(errno));
            }
            if (rc == 0) continue;
            char chunk[4096];
            const ssize_t n = ::read(from_child_, chunk, sizeof chunk);
            if (n < 0) {
                if (errno == EINTR) continue;
                throw SegmenterIoError(std::string("read from child failed: ") + std::strerror(errno));
            }
            if (n == 0) {
                eof_ = true;
            } else {
                buffer_.append(chunk, static_cast<std::size_t>(n));
            }
        }
    }

    /// Closes the pipes, then SIGKILLs the child if it has not exited after `grace`.
    void terminate(std::chrono::milliseconds grace = std::chrono::milliseconds(200)) {
        if (to_child_ >= 0) ::close(to_child_);
        if (from_child_ >= 0) ::close(from_child_);
        to_child_ = from_child_ = -1;
        if (pid_ <= 0) return;
        const auto deadline = std::chrono::steady_clock::now() + grace;
        int status = 0;
        while (::waitpid(pid_, &status, WNOHANG) == 0) {
            if (std::chrono::steady_clock::now() >= deadline) {
                ::kill(-pid_, SIGKILL);
                ::waitpid(pid_, &status, 0);
                break;
            }
            ::usleep(2000);
        }
        pid_ = -1;
    }

private:
    pid_t pid_ = -1;
    int to_child_ = -1;
    int from_child_ = -1;
    std::string buffer_;
    bool eof_ = false;
};

}  // namespace srpl
