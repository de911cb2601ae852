#include "airseg/parallel.hpp"

#include <cstdlib>

namespace airseg {

ThreadPool::ThreadPool() {
  int n = 0;
  if (const char* env = std::getenv("AIRSEG_THREADS")) {
    n = std::atoi(env);
  }
  if (n <= 0) {
    n = int(std::thread::hardware_concurrency());
  }
  if (n <= 0) n = 1;
  start_workers(n);
}

void ThreadPool::set_threads(int n) {
  if (n <= 0) n = 1;
  if (n == nthreads_) return;
  stop_workers();
  start_workers(n);
}

void ThreadPool::start_workers(int n) {
  nthreads_ = n;
  stopping_ = false;
  // the calling thread participates, so spawn n-1 workers
  for (int i = 0; i < n - 1; ++i) {
    workers_.emplace_back([this] { worker_loop(); });
  }
}

void ThreadPool::stop_workers() {
  {
    std::lock_guard<std::mutex> lk(mu_);
    stopping_ = true;
    ++generation_;
  }
  cv_work_.notify_all();
  for (auto& w : workers_) w.join();
  workers_.clear();
}

void ThreadPool::worker_loop() {
  uint64_t seen = 0;
  for (;;) {
    const std::function<void(int)>* job = nullptr;
    {
      std::unique_lock<std::mutex> lk(mu_);
      cv_work_.wait(lk, [&] { return stopping_ || generation_ != seen; });
      if (stopping_) return;
      seen = generation_;
      job = job_;
    }
    if (!job) continue;
    for (;;) {
      int i = next_job_.fetch_add(1, std::memory_order_relaxed);
      if (i >= njobs_) break;
      try {
        (*job)(i);
      } catch (...) {
        std::lock_guard<std::mutex> lk(error_mu_);
        if (!error_) error_ = std::current_exception();
      }
      pending_.fetch_sub(1, std::memory_order_acq_rel);
    }
    cv_done_.notify_all();
  }
}

void ThreadPool::run(int njobs, const std::function<void(int)>& job) {
  if (njobs <= 0) return;
  if (nthreads_ == 1 || njobs == 1) {
    for (int i = 0; i < njobs; ++i) job(i);
    return;
  }
  {
    std::lock_guard<std::mutex> lk(mu_);
    job_ = &job;
    njobs_ = njobs;
    next_job_.store(0, std::memory_order_relaxed);
    pending_.store(njobs, std::memory_order_relaxed);
    error_ = nullptr;
    ++generation_;
  }
  cv_work_.notify_all();
  // calling thread pulls jobs too
  for (;;) {
    int i = next_job_.fetch_add(1, std::memory_order_relaxed);
    if (i >= njobs) break;
    try {
      job(i);
    } catch (...) {
      std::lock_guard<std::mutex> lk(error_mu_);
      if (!error_) error_ = std::current_exception();
    }
    pending_.fetch_sub(1, std::memory_order_acq_rel);
  }
  if (pending_.load(std::memory_order_acquire) != 0) {
    std::unique_lock<std::mutex> lk(mu_);
    cv_done_.wait(lk, [&] { return pending_.load(std::memory_order_acquire) == 0; });
  }
  {
    std::lock_guard<std::mutex> lk(mu_);
    job_ = nullptr;
  }
  if (error_) std::rethrow_exception(error_);
}

}  // namespace airseg
