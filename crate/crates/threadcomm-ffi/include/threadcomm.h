/*
 * C interface to the thread communicator: a message-passing runtime that
 * assigns MPI-style ranks to the threads of one or more processes.
 *
 * Usage pattern:
 *
 *   tc_comm *comm;
 *   tc_comm_create(nthreads, &comm);        // once, outside parallel code
 *   // ... on each of the nthreads threads:
 *   tc_start(comm);                         // binds the thread to a rank
 *   tc_comm_rank(comm, &rank);
 *   tc_send(comm, buf, len, dst, tag);
 *   tc_recv(comm, buf, cap, src, tag, &env);
 *   tc_finish(comm);                        // rank ends here
 *   // ... once, after the threads have joined:
 *   tc_comm_free(comm);
 *
 * Every function returns TC_OK (0) or a TC_ERR_* code; a thread-local
 * description of the most recent failure is available via tc_last_error.
 * Run under the `tcrun` launcher to span multiple processes; the same
 * program then sees one rank space covering every process.
 */

#ifndef THREADCOMM_H
#define THREADCOMM_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

/* ---- status codes -------------------------------------------------- */

#define TC_OK 0
#define TC_ERR_INVALID_ARGUMENT 1
#define TC_ERR_INVALID_STATE 2
#define TC_ERR_INVALID_HANDLE 3
#define TC_ERR_TOO_MANY_THREADS 4
#define TC_ERR_PENDING_OPERATIONS 5
#define TC_ERR_TRUNCATION 6
#define TC_ERR_TRANSPORT 7
#define TC_ERR_PROTOCOL 8
#define TC_ERR_PANIC 9

/* ---- receive wildcards --------------------------------------------- */

#define TC_ANY_SOURCE (-1)
#define TC_ANY_TAG (-1)

/* ---- protocol policies (tc_config.protocol) ------------------------ */

#define TC_PROTO_AUTO 0
#define TC_PROTO_EAGER 1
#define TC_PROTO_ONECOPY 2
#define TC_PROTO_PIPELINE 3

/* ---- barrier variants (tc_barrier) ---------------------------------- */

#define TC_BARRIER_MESSAGE 0
#define TC_BARRIER_ATOMIC 1

/* ---- reduction operators and element types -------------------------- */

#define TC_OP_SUM 0
#define TC_OP_MIN 1
#define TC_OP_MAX 2

#define TC_ELEM_INT32 0
#define TC_ELEM_INT64 1
#define TC_ELEM_FLOAT64 2

/* ---- types ----------------------------------------------------------- */

/* Opaque communicator handle. */
typedef struct tc_comm tc_comm;

/* Tuning knobs for tc_comm_create_with_config. Zero selects the library
 * default for the sizes; protocol 0 is the automatic policy. */
typedef struct tc_config {
    size_t eager_threshold; /* largest payload sent eagerly (auto policy) */
    size_t cell_size;       /* payload capacity of one transport cell */
    size_t cells_per_rank;  /* cells reserved per receiving thread */
    int protocol;           /* TC_PROTO_* */
} tc_config;

/* Delivery record filled in by tc_recv. */
typedef struct tc_envelope {
    int src_rank; /* global rank of the sender */
    int tag;      /* tag the message was sent with */
    size_t len;   /* payload bytes (may be less than the buffer) */
} tc_envelope;

/* Per-thread traffic counters for the current activation window. */
typedef struct tc_stats {
    uint64_t sends;
    uint64_t recvs;
    uint64_t eager_sends;    /* completed via one eager cell/frame */
    uint64_t onecopy_sends;  /* receiver copied from the sender buffer */
    uint64_t pipeline_sends; /* streamed through multiple cells/chunks */
    uint64_t progress_events;
} tc_stats;

/* ---- diagnostics ----------------------------------------------------- */

/* Copy this thread's most recent error text into buf (NUL-terminated when
 * cap > 0). Returns the full length including the terminator. */
size_t tc_last_error(char *buf, size_t cap);

/* Static name for a status code; never NULL. */
const char *tc_error_name(int code);

/* ---- lifecycle -------------------------------------------------------- */

/* Fill *out with the default configuration. */
int tc_config_default(tc_config *out);

/* Create a communicator for nthreads threads of this process. Collective
 * across processes when run under the launcher. */
int tc_comm_create(size_t nthreads, tc_comm **out);

/* As tc_comm_create, with explicit tuning (cfg may be NULL). */
int tc_comm_create_with_config(size_t nthreads, const tc_config *cfg,
                               tc_comm **out);

/* Release the communicator. Collective. On TC_OK the handle is invalid;
 * on error (e.g. a window is still active) it remains usable. */
int tc_comm_free(tc_comm *comm);

/* Enter an activation window; assigns the calling thread a rank. Must be
 * called by exactly the configured number of threads. */
int tc_start(tc_comm *comm);

/* Leave the activation window. Fails with TC_ERR_PENDING_OPERATIONS while
 * this thread still has unfinished requests. */
int tc_finish(tc_comm *comm);

/* This thread's rank / the total rank count. Only valid inside a window. */
int tc_comm_rank(tc_comm *comm, int *rank);
int tc_comm_size(tc_comm *comm, int *size);

/* ---- point-to-point --------------------------------------------------- */

/* Blocking send of len bytes to global rank dst with tag (0 <= tag). */
int tc_send(tc_comm *comm, const void *buf, size_t len, int dst, int tag);

/* Blocking receive into buf (capacity cap). src and tag are exact values
 * or TC_ANY_SOURCE / TC_ANY_TAG. env may be NULL. A message longer than
 * cap fails with TC_ERR_TRUNCATION and is consumed. */
int tc_recv(tc_comm *comm, void *buf, size_t cap, int src, int tag,
            tc_envelope *env);

/* ---- collectives ------------------------------------------------------ */

/* Barrier over all ranks; variant is TC_BARRIER_MESSAGE or _ATOMIC. */
int tc_barrier(tc_comm *comm, int variant);

/* Broadcast len bytes from root's buf into every rank's buf. */
int tc_bcast(tc_comm *comm, void *buf, size_t len, int root);

/* Reduce count elements of type elem with op from every rank's send into
 * root's recv. Non-root ranks may pass recv = NULL. */
int tc_reduce(tc_comm *comm, const void *send, void *recv, size_t count,
              int elem, int op, int root);

/* Reduce and broadcast: every rank receives the result in recv. */
int tc_allreduce(tc_comm *comm, const void *send, void *recv, size_t count,
                 int elem, int op);

/* ---- attributes and stats --------------------------------------------- */

/* Attach value to this thread's rank under key for the duration of the
 * current activation window. Attributes vanish at tc_finish. */
int tc_attr_set(tc_comm *comm, uint32_t key, uint64_t value);

/* Look up attribute key: sets *present to 1 and fills *value when found,
 * else sets *present to 0. */
int tc_attr_get(tc_comm *comm, uint32_t key, uint64_t *value, int *present);

/* Copy this thread's traffic counters into *out. */
int tc_comm_stats(tc_comm *comm, tc_stats *out);

#ifdef __cplusplus
} /* extern "C" */
#endif

#endif /* THREADCOMM_H */
