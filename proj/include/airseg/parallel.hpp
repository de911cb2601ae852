#pragma once

#include <atomic>
#include <condition_variable>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace airseg {

/// Shared worker pool for data-parallel loops.
///
/// Jobs are indexed blocks whose partition is fixed by the caller, never by
/// the thread count, and every job writes disjoint output. Results are
/// therefore bit-identical for any number of threads; only wall time changes.
class ThreadPool {
 public:
  static ThreadPool& instance() {
    static ThreadPool pool;
    return pool;
  }

  /// Effective worker count (>= 1). Configured via set_threads or the
  /// AIRSEG_THREADS environment variable; defaults to hardware concurrency.
  int threads() const { return nthreads_; }

  void set_threads(int n);

  /// Runs job(i) for i in [0, njobs). Blocks until all jobs finish.
  /// Exceptions from jobs are rethrown on the calling thread.
  void run(int njobs, const std::function<void(int)>& job);

  ~ThreadPool() { stop_workers(); }

 private:
  ThreadPool();
  void start_workers(int n);
  void stop_workers();
  void worker_loop();

  std::vector<std::thread> workers_;
  std::mutex mu_;
  std::condition_variable cv_work_, cv_done_;
  const std::function<void(int)>* job_ = nullptr;
  std::atomic<int> next_job_{0};
  int njobs_ = 0;
  std::atomic<int> pending_{0};
  uint64_t generation_ = 0;
  bool stopping_ = false;
  int nthreads_ = 1;
  std::exception_ptr error_;
  std::mutex error_mu_;
};

/// Convenience wrapper over the global pool.
inline void parallel_for(int njobs, const std::function<void(int)>& job) {
  ThreadPool::instance().run(njobs, job);
}

}  // namespace airseg
