# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled per-node kernels: box/ball projections and distances, grouped
probability-weighted means, and weighted p-th power sums.

These are the innermost operations of feasibility restoration, penalty
evaluation and grid search; keeping them in C avoids per-call numpy overhead
on the tiny arrays a scenario tree produces.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport pow, sqrt

cnp.import_array()

BACKEND = "cython"


def box_project(double[:, ::1] z, double[::1] lo, double[::1] hi):
    cdef Py_ssize_t n = z.shape[0], d = z.shape[1], i, j
    out_arr = np.empty((n, d))
    cdef double[:, ::1] out = out_arr
    cdef double v
    for i in range(n):
        for j in range(d):
            v = z[i, j]
            if v < lo[j]:
                v = lo[j]
            elif v > hi[j]:
                v = hi[j]
            out[i, j] = v
    return out_arr


def box_distance(double[:, ::1] z, double[::1] lo, double[::1] hi):
    cdef Py_ssize_t n = z.shape[0], d = z.shape[1], i, j
    out_arr = np.empty(n)
    cdef double[::1] out = out_arr
    cdef double acc, e
    for i in range(n):
        acc = 0.0
        for j in range(d):
            e = 0.0
            if z[i, j] < lo[j]:
                e = lo[j] - z[i, j]
            elif z[i, j] > hi[j]:
                e = z[i, j] - hi[j]
            acc += e * e
        out[i] = sqrt(acc)
    return out_arr


def ball_project(double[:, ::1] z, double[::1] center, double radius):
    cdef Py_ssize_t n = z.shape[0], d = z.shape[1], i, j
    out_arr = np.empty((n, d))
    cdef double[:, ::1] out = out_arr
    cdef double acc, scale
    for i in range(n):
        acc = 0.0
        for j in range(d):
            acc += (z[i, j] - center[j]) * (z[i, j] - center[j])
        acc = sqrt(acc)
        scale = 1.0 if acc <= radius else radius / acc
        for j in range(d):
            out[i, j] = center[j] + (z[i, j] - center[j]) * scale
    return out_arr


def ball_distance(double[:, ::1] z, double[::1] center, double radius):
    cdef Py_ssize_t n = z.shape[0], d = z.shape[1], i, j
    out_arr = np.empty(n)
    cdef double[::1] out = out_arr
    cdef double acc
    for i in range(n):
        acc = 0.0
        for j in range(d):
            acc += (z[i, j] - center[j]) * (z[i, j] - center[j])
        acc = sqrt(acc) - radius
        out[i] = acc if acc > 0.0 else 0.0
    return out_arr


def segment_weighted_mean(double[:, ::1] values, double[::1] weights,
                          long long[::1] groups, int n_groups):
    cdef Py_ssize_t n = values.shape[0], d = values.shape[1], i, j
    cdef long long g
    out_arr = np.zeros((n_groups, d))
    mass_arr = np.zeros(n_groups)
    cdef double[:, ::1] out = out_arr
    cdef double[::1] mass = mass_arr
    for i in range(n):
        g = groups[i]
        mass[g] += weights[i]
        for j in range(d):
            out[g, j] += weights[i] * values[i, j]
    for g in range(n_groups):
        for j in range(d):
            out[g, j] /= mass[g]
    return out_arr


def weighted_power_sum(double[:, ::1] values, double[::1] weights, double p):
    cdef Py_ssize_t n = values.shape[0], d = values.shape[1], i, j
    cdef double acc = 0.0, s
    for i in range(n):
        s = 0.0
        for j in range(d):
            s += values[i, j] * values[i, j]
        acc += weights[i] * pow(sqrt(s), p)
    return acc
