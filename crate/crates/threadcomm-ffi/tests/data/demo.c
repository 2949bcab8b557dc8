/* Two-thread smoke test of the C interface: rank exchange, ping-pong,
 * allreduce, barrier, attribute lifetime, and error reporting. */
#include <pthread.h>
#include <stdio.h>
#include <string.h>
#include <threadcomm.h>

static tc_comm *comm;
static int failures;

#define CHECK(expr, want)                                                      \
    do {                                                                       \
        int rc_ = (expr);                                                      \
        if (rc_ != (want)) {                                                   \
            char msg[256];                                                     \
            tc_last_error(msg, sizeof msg);                                    \
            fprintf(stderr, "%s -> %s (%s)\n", #expr, tc_error_name(rc_), msg);\
            __atomic_add_fetch(&failures, 1, __ATOMIC_RELAXED);                \
        }                                                                      \
    } while (0)

static void *worker(void *arg)
{
    (void)arg;
    CHECK(tc_start(comm), TC_OK);

    int me = -1, n = -1;
    CHECK(tc_comm_rank(comm, &me), TC_OK);
    CHECK(tc_comm_size(comm, &n), TC_OK);
    if (n != 2)
        __atomic_add_fetch(&failures, 1, __ATOMIC_RELAXED);
    int peer = 1 - me;

    char out[24], in[24];
    memset(out, 'a' + me, sizeof out);
    tc_envelope env;
    if (me == 0) {
        CHECK(tc_send(comm, out, sizeof out, peer, 3), TC_OK);
        CHECK(tc_recv(comm, in, sizeof in, peer, 3, &env), TC_OK);
    } else {
        CHECK(tc_recv(comm, in, sizeof in, TC_ANY_SOURCE, 3, &env), TC_OK);
        CHECK(tc_send(comm, out, sizeof out, peer, 3), TC_OK);
    }
    if (env.src_rank != peer || env.len != sizeof in || in[0] != 'a' + peer)
        __atomic_add_fetch(&failures, 1, __ATOMIC_RELAXED);

    long long send = me + 1, recv = 0;
    CHECK(tc_allreduce(comm, &send, &recv, 1, TC_ELEM_INT64, TC_OP_SUM), TC_OK);
    if (recv != 3)
        __atomic_add_fetch(&failures, 1, __ATOMIC_RELAXED);

    CHECK(tc_attr_set(comm, 1, 42), TC_OK);
    uint64_t v = 0;
    int present = 0;
    CHECK(tc_attr_get(comm, 1, &v, &present), TC_OK);
    if (!present || v != 42)
        __atomic_add_fetch(&failures, 1, __ATOMIC_RELAXED);

    CHECK(tc_barrier(comm, TC_BARRIER_ATOMIC), TC_OK);

    tc_stats st;
    CHECK(tc_comm_stats(comm, &st), TC_OK);
    if (st.sends < 1 || st.recvs < 1)
        __atomic_add_fetch(&failures, 1, __ATOMIC_RELAXED);

    CHECK(tc_finish(comm), TC_OK);
    return NULL;
}

int main(void)
{
    /* Negative paths first: misuse must fail cleanly, not crash. */
    CHECK(tc_start(NULL), TC_ERR_INVALID_HANDLE);
    tc_comm *bad = NULL;
    CHECK(tc_comm_create(0, &bad), TC_ERR_INVALID_ARGUMENT);

    tc_config cfg;
    CHECK(tc_config_default(&cfg), TC_OK);
    CHECK(tc_comm_create_with_config(2, &cfg, &comm), TC_OK);

    pthread_t a, b;
    pthread_create(&a, NULL, worker, NULL);
    pthread_create(&b, NULL, worker, NULL);
    pthread_join(a, NULL);
    pthread_join(b, NULL);

    CHECK(tc_comm_free(comm), TC_OK);

    if (failures == 0) {
        puts("c-abi smoke: all checks passed");
        return 0;
    }
    fprintf(stderr, "c-abi smoke: %d failures\n", failures);
    return 1;
}
