#ifndef BATCHSOCKET_H
#define BATCHSOCKET_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

// Capacity of the shape arrays.
#define BS_MAX_NDIM 8

typedef enum BsStatus {
  BS_STATUS_OK = 0,
  // `bs_consumer_next` reached the end of an epoch.
  BS_STATUS_EPOCH_END = 1,
  // `bs_consumer_next` has nothing more to deliver.
  BS_STATUS_END_OF_STREAM = 2,
  BS_STATUS_NULL_ARGUMENT = -1,
  BS_STATUS_INVALID_ARGUMENT = -2,
  BS_STATUS_CONNECT = -3,
  BS_STATUS_PROTOCOL = -4,
  BS_STATUS_PAYLOAD = -5,
  BS_STATUS_IO = -6,
  BS_STATUS_PANIC = -7,
} BsStatus;

// One mapped batch.
typedef struct BsBatch BsBatch;

// Connected consumer session.
typedef struct BsConsumer BsConsumer;

// Bound producer, run once.
typedef struct BsProducer BsProducer;

typedef struct BsConsumerOptions {
  uint64_t consumer_id;
  // NUL-terminated endpoint; NULL reads `BATCHSOCKET_BROADCAST` or the default.
  const char *broadcast;
  // NUL-terminated endpoint; NULL reads `BATCHSOCKET_AGGREGATE` or the default.
  const char *aggregate;
  // NULL means `/dev/shm`.
  const char *shm_dir;
  uint64_t heartbeat_interval_ms;
  uint64_t connect_timeout_ms;
  // 0 takes the producer's buffer depth.
  uint16_t queue_capacity;
  bool verify_checksums;
} BsConsumerOptions;

typedef struct BsWelcome {
  uint32_t epoch;
  uint64_t epoch_len;
  uint16_t buffer_depth;
  // 0 wait for next epoch, 1 rubberband, 2 immediate.
  uint8_t admission;
} BsWelcome;

typedef struct BsBatchInfo {
  uint32_t epoch;
  uint64_t batch_index;
  // Wire dtype code: 0 u8, 1 i32, 2 i64, 3 f32, 4 f64.
  uint8_t dtype;
  uint8_t ndim;
  uint64_t shape[BS_MAX_NDIM];
  uint64_t byte_len;
  uint32_t checksum;
} BsBatchInfo;

typedef struct BsProducerOptions {
  const char *broadcast;
  const char *aggregate;
  const char *shm_dir;
  uint32_t epochs;
  uint64_t epoch_len;
  uint32_t batch_size;
  uint8_t sample_ndim;
  uint64_t sample_shape[BS_MAX_NDIM];
  uint8_t dtype;
  uint64_t seed;
  uint16_t buffer_depth;
  double rubberband_fraction;
  uint64_t heartbeat_interval_ms;
  uint64_t heartbeat_timeout_ms;
  uint64_t pause_poll_interval_ms;
  uint32_t await_consumers;
  uint16_t workers;
  uint64_t prep_cost_us_per_sample;
  bool verify_checksums;
} BsProducerOptions;

typedef struct BsRunSummary {
  uint64_t announced;
  uint64_t acks;
  uint64_t evictions;
  uint32_t epochs_completed;
  uint64_t pipeline_calls;
  uint64_t payload_bytes_written;
  uint64_t peak_live_segments;
} BsRunSummary;

// Protocol version spoken on the control channel.
uint16_t bs_protocol_version(void);

// CRC-32 (IEEE) of `len` bytes, as carried in announcements.
//
// # Safety
// `data` points to `len` readable bytes, or `len` is 0.
uint32_t bs_checksum(const uint8_t *data, size_t len);

// Copies the calling thread's last error into `buf` (NUL-terminated,
// truncated to `cap`) and returns its full length in bytes.
//
// # Safety
// `buf` is NULL or points to `cap` writable bytes.
size_t bs_last_error_message(char *buf, size_t cap);

// Fills `out` with the defaults: ids must still be set.
//
// # Safety
// `out` is NULL or writable.
enum BsStatus bs_consumer_options_default(struct BsConsumerOptions *out);

// Joins the producer and blocks until admitted.
//
// # Safety
// `opts` and `out` are valid; string fields are NULL or NUL-terminated.
enum BsStatus bs_consumer_connect(const struct BsConsumerOptions *opts, struct BsConsumer **out);

// # Safety
// `c` is a live consumer handle and `out` is writable.
enum BsStatus bs_consumer_welcome(const struct BsConsumer *c, struct BsWelcome *out);

// Blocks for the next event. `Ok` stores a batch in `*batch`; `EpochEnd`
// stores the finished epoch in `*epoch`; `EndOfStream` stores neither.
//
// # Safety
// `c` is a live consumer handle; `batch` and `epoch` are writable.
enum BsStatus bs_consumer_next(struct BsConsumer *c, struct BsBatch **batch, uint32_t *epoch);

// Sends `Bye` and frees the handle. Outstanding batches stay valid.
//
// # Safety
// `c` is NULL or a live consumer handle, not used afterwards.
void bs_consumer_close(struct BsConsumer *c);

// Points `*data` at the payload, valid until the batch is released.
//
// # Safety
// `b` is a live batch handle; `data` and `len` are writable.
enum BsStatus bs_batch_data(const struct BsBatch *b, const uint8_t **data, size_t *len);

// # Safety
// `b` is a live batch handle and `out` is writable.
enum BsStatus bs_batch_info(const struct BsBatch *b, struct BsBatchInfo *out);

// Unmaps the batch and frees the handle.
//
// # Safety
// `b` is NULL or a live batch handle, not used afterwards.
void bs_batch_release(struct BsBatch *b);

// Fills `out` with a synthetic source of 100 batches of 32 x [16] f32.
//
// # Safety
// `out` is NULL or writable.
enum BsStatus bs_producer_options_default(struct BsProducerOptions *out);

// Binds both endpoints over a synthetic source. Consumers may connect as
// soon as this returns.
//
// # Safety
// `opts` and `out` are valid; string fields are NULL or NUL-terminated.
enum BsStatus bs_producer_bind(const struct BsProducerOptions *opts, struct BsProducer **out);

// Serves every epoch, blocking until done or stopped. A producer runs once.
//
// # Safety
// `p` is a live producer handle; `summary` is NULL or writable.
enum BsStatus bs_producer_run(const struct BsProducer *p, struct BsRunSummary *summary);

// Asks a running producer to shut down. Safe from any thread.
//
// # Safety
// `p` is NULL or a live producer handle.
void bs_producer_stop(const struct BsProducer *p);

// # Safety
// `p` is NULL or a producer handle no longer in use by any thread.
void bs_producer_free(struct BsProducer *p);

#endif  /* BATCHSOCKET_H */
