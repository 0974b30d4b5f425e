# cython: language_level=3
"""Compiled hop engine; same contract and event order as ``_hopengine_py``."""

from libc.stdlib cimport malloc, realloc, free
from libc.string cimport memcpy

import numpy as np

cdef enum:
    TIMER = 0
    DELIVERED = 1
    RETURNED = 2

cdef struct Ev:
    double t
    long long seq
    long pid      # -1 for timers
    long x        # hop index, or timer tag


cdef void* xrealloc(void* p, size_t nbytes) except NULL:
    cdef void* q = realloc(p, nbytes)
    if q == NULL:
        raise MemoryError()
    return q


cdef inline bint ev_less(Ev* a, Ev* b) nogil:
    if a.t < b.t:
        return True
    if a.t > b.t:
        return False
    return a.seq < b.seq


cdef class HopEngine:
    cdef Ev* heap
    cdef Py_ssize_t hsize, hcap
    cdef long long seq
    cdef public double now
    cdef public long long event_count
    cdef public bint record
    # packets, flattened
    cdef int* nodes
    cdef Py_ssize_t nodes_len, nodes_cap
    cdef double* delays
    cdef Py_ssize_t delays_len, delays_cap
    cdef Py_ssize_t* node_off
    cdef Py_ssize_t* delay_off
    cdef int* nlinks
    cdef int* deliver
    cdef long long* tags
    cdef Py_ssize_t npk, pcap
    # trace
    cdef double* tr_t
    cdef int* tr_src
    cdef int* tr_dst
    cdef Py_ssize_t tlen, tcap

    def __cinit__(self, bint record=True):
        self.record = record
        self.now = 0.0
        self.event_count = 0
        self.seq = 0
        self.hsize = 0
        self.hcap = 1024
        self.heap = <Ev*> malloc(self.hcap * sizeof(Ev))
        self.nodes_len = 0
        self.nodes_cap = 4096
        self.nodes = <int*> malloc(self.nodes_cap * sizeof(int))
        self.delays_len = 0
        self.delays_cap = 4096
        self.delays = <double*> malloc(self.delays_cap * sizeof(double))
        self.npk = 0
        self.pcap = 512
        self.node_off = <Py_ssize_t*> malloc(self.pcap * sizeof(Py_ssize_t))
        self.delay_off = <Py_ssize_t*> malloc(self.pcap * sizeof(Py_ssize_t))
        self.nlinks = <int*> malloc(self.pcap * sizeof(int))
        self.deliver = <int*> malloc(self.pcap * sizeof(int))
        self.tags = <long long*> malloc(self.pcap * sizeof(long long))
        self.tlen = 0
        self.tcap = 8192
        self.tr_t = <double*> malloc(self.tcap * sizeof(double))
        self.tr_src = <int*> malloc(self.tcap * sizeof(int))
        self.tr_dst = <int*> malloc(self.tcap * sizeof(int))
        if (self.heap == NULL or self.nodes == NULL or self.delays == NULL or self.node_off == NULL
                or self.delay_off == NULL or self.nlinks == NULL or self.deliver == NULL
                or self.tags == NULL or self.tr_t == NULL or self.tr_src == NULL or self.tr_dst == NULL):
            raise MemoryError()

    def __dealloc__(self):
        free(self.heap)
        free(self.nodes)
        free(self.delays)
        free(self.node_off)
        free(self.delay_off)
        free(self.nlinks)
        free(self.deliver)
        free(self.tags)
        free(self.tr_t)
        free(self.tr_src)
        free(self.tr_dst)

    def __len__(self):
        return self.hsize

    cdef void _grow_packets(self) except *:
        cdef Py_ssize_t c = self.pcap * 2
        self.node_off = <Py_ssize_t*> xrealloc(self.node_off, c * sizeof(Py_ssize_t))
        self.delay_off = <Py_ssize_t*> xrealloc(self.delay_off, c * sizeof(Py_ssize_t))
        self.nlinks = <int*> xrealloc(self.nlinks, c * sizeof(int))
        self.deliver = <int*> xrealloc(self.deliver, c * sizeof(int))
        self.tags = <long long*> xrealloc(self.tags, c * sizeof(long long))
        self.pcap = c

    cdef void _grow_trace(self) except *:
        cdef Py_ssize_t c = self.tcap * 2
        self.tr_t = <double*> xrealloc(self.tr_t, c * sizeof(double))
        self.tr_src = <int*> xrealloc(self.tr_src, c * sizeof(int))
        self.tr_dst = <int*> xrealloc(self.tr_dst, c * sizeof(int))
        self.tcap = c

    cdef void _push(self, double t, long pid, long x) except *:
        cdef Py_ssize_t i, parent
        cdef Ev e
        if self.hsize == self.hcap:
            self.hcap *= 2
            self.heap = <Ev*> xrealloc(self.heap, self.hcap * sizeof(Ev))
        e.t = t
        e.seq = self.seq
        e.pid = pid
        e.x = x
        self.seq += 1
        i = self.hsize
        self.hsize += 1
        while i > 0:
            parent = (i - 1) >> 1
            if ev_less(&e, &self.heap[parent]):
                self.heap[i] = self.heap[parent]
                i = parent
            else:
                break
        self.heap[i] = e

    cdef Ev _popmin(self):
        cdef Ev top = self.heap[0]
        cdef Ev last
        cdef Py_ssize_t i = 0, child, n
        self.hsize -= 1
        n = self.hsize
        if n > 0:
            last = self.heap[n]
            while True:
                child = 2 * i + 1
                if child >= n:
                    break
                if child + 1 < n and ev_less(&self.heap[child + 1], &self.heap[child]):
                    child += 1
                if ev_less(&self.heap[child], &last):
                    self.heap[i] = self.heap[child]
                    i = child
                else:
                    break
            self.heap[i] = last
        return top

    def schedule_timer(self, double t, long long tag):
        if t < self.now:
            raise ValueError(f"timer at {t} is in the past (now={self.now})")
        self._push(t, -1, tag)

    def inject(self, double t0, nodes, delays, int deliver_at, long long tag):
        cdef Py_ssize_t nn = len(nodes), nd = len(delays), i, pid
        if t0 < self.now:
            raise ValueError(f"injection at {t0} is in the past (now={self.now})")
        if nd != nn - 2:
            raise ValueError("need one delay per intermediate node")
        if deliver_at < 0 or deliver_at >= nn - 1:
            raise ValueError("deliver_at must name a link of the route")
        if self.npk == self.pcap:
            self._grow_packets()
        while self.nodes_len + nn > self.nodes_cap:
            self.nodes_cap *= 2
            self.nodes = <int*> xrealloc(self.nodes, self.nodes_cap * sizeof(int))
        while self.delays_len + nd > self.delays_cap:
            self.delays_cap *= 2
            self.delays = <double*> xrealloc(self.delays, self.delays_cap * sizeof(double))
        pid = self.npk
        self.node_off[pid] = self.nodes_len
        self.delay_off[pid] = self.delays_len
        for i in range(nn):
            self.nodes[self.nodes_len + i] = <int> nodes[i]
        for i in range(nd):
            self.delays[self.delays_len + i] = <double> delays[i]
        self.nodes_len += nn
        self.delays_len += nd
        self.nlinks[pid] = <int> (nn - 1)
        self.deliver[pid] = deliver_at
        self.tags[pid] = tag
        self.npk += 1
        self._push(t0, pid, 0)
        return pid

    def pop(self):
        cdef Ev e
        cdef Py_ssize_t no
        cdef int last
        while self.hsize > 0:
            e = self._popmin()
            self.now = e.t
            if e.pid < 0:
                return e.t, e.x, TIMER
            no = self.node_off[e.pid]
            self.event_count += 1
            if self.record:
                if self.tlen == self.tcap:
                    self._grow_trace()
                self.tr_t[self.tlen] = e.t
                self.tr_src[self.tlen] = self.nodes[no + e.x]
                self.tr_dst[self.tlen] = self.nodes[no + e.x + 1]
                self.tlen += 1
            last = self.nlinks[e.pid] - 1
            if e.x < last:
                self._push(e.t + self.delays[self.delay_off[e.pid] + e.x], e.pid, e.x + 1)
            if e.x == self.deliver[e.pid]:
                return e.t, self.tags[e.pid], DELIVERED
            if e.x == last:
                return e.t, self.tags[e.pid], RETURNED
        return None

    def trace(self):
        t = np.empty(self.tlen, dtype=np.float64)
        s = np.empty(self.tlen, dtype=np.int32)
        d = np.empty(self.tlen, dtype=np.int32)
        cdef double[::1] tv = t
        cdef int[::1] sv = s
        cdef int[::1] dv = d
        if self.tlen:
            memcpy(&tv[0], self.tr_t, self.tlen * sizeof(double))
            memcpy(&sv[0], self.tr_src, self.tlen * sizeof(int))
            memcpy(&dv[0], self.tr_dst, self.tlen * sizeof(int))
        return t, s, d
