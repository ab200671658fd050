"""Parametric object shapes with analytic surface sampling and ray queries.

Handover objects are randomized primitives (box, cylinder, sphere, capsule).
Each shape can sample area-weighted surface points with exact outward normals
and cast a ray from a surface point through the body to the exit point, which
is what antipodal grasp pairing needs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_RAY_EPS = 1e-9


def _unit(v):
    return v / np.linalg.norm(v)


def _sample_sphere_dirs(rng, n):
    z = rng.uniform(-1.0, 1.0, size=n)
    phi = rng.uniform(0.0, 2.0 * np.pi, size=n)
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    return np.column_stack([r * np.cos(phi), r * np.sin(phi), z])


@dataclass(frozen=True)
class Box:
    half_extents: tuple  # (hx, hy, hz)

    kind = "box"

    def surface(self, n, rng):
        hx, hy, hz = self.half_extents
        areas = np.array([hy * hz, hy * hz, hx * hz, hx * hz, hx * hy, hx * hy]) * 4.0
        face = rng.choice(6, size=n, p=areas / areas.sum())
        u = rng.uniform(-1.0, 1.0, size=(n, 2))
        pts = np.empty((n, 3))
        nrm = np.zeros((n, 3))
        h = np.array([hx, hy, hz])
        for f in range(6):
            axis, sign = divmod(f, 2)
            sign = 1.0 if sign == 0 else -1.0
            m = face == f
            others = [i for i in range(3) if i != axis]
            pts[m, axis] = sign * h[axis]
            pts[m, others[0]] = u[m, 0] * h[others[0]]
            pts[m, others[1]] = u[m, 1] * h[others[1]]
            nrm[m, axis] = sign
        return pts, nrm

    def ray_exit(self, origin, direction):
        h = np.asarray(self.half_extents)
        d = np.asarray(direction, dtype=float)
        o = np.asarray(origin, dtype=float)
        t_exit = np.inf
        axis_exit = -1
        for i in range(3):
            if abs(d[i]) < _RAY_EPS:
                if abs(o[i]) > h[i] + _RAY_EPS:
                    return None
                continue
            t = ((h[i] if d[i] > 0 else -h[i]) - o[i]) / d[i]
            if t < t_exit:
                t_exit = t
                axis_exit = i
        if axis_exit < 0 or t_exit <= _RAY_EPS:
            return None
        p = o + t_exit * d
        nrm = np.zeros(3)
        nrm[axis_exit] = 1.0 if d[axis_exit] > 0 else -1.0
        return p, nrm

    def to_dict(self):
        return {"kind": self.kind, "half_extents": [float(x) for x in self.half_extents]}


@dataclass(frozen=True)
class Sphere:
    radius: float

    kind = "sphere"

    def surface(self, n, rng):
        dirs = _sample_sphere_dirs(rng, n)
        return dirs * self.radius, dirs

    def ray_exit(self, origin, direction):
        o = np.asarray(origin, dtype=float)
        d = _unit(np.asarray(direction, dtype=float))
        b = o @ d
        c = o @ o - self.radius ** 2
        disc = b * b - c
        if disc < 0:
            return None
        t = -b + np.sqrt(disc)
        if t <= _RAY_EPS:
            return None
        p = o + t * d
        return p, p / self.radius

    def to_dict(self):
        return {"kind": self.kind, "radius": float(self.radius)}


@dataclass(frozen=True)
class Cylinder:
    radius: float
    height: float  # full length along z

    kind = "cylinder"

    def surface(self, n, rng):
        r, h = self.radius, self.height
        a_side = 2 * np.pi * r * h
        a_cap = np.pi * r * r
        which = rng.choice(3, size=n, p=np.array([a_side, a_cap, a_cap]) / (a_side + 2 * a_cap))
        phi = rng.uniform(0, 2 * np.pi, size=n)
        pts = np.empty((n, 3))
        nrm = np.zeros((n, 3))
        side = which == 0
        pts[side, 0] = r * np.cos(phi[side])
        pts[side, 1] = r * np.sin(phi[side])
        pts[side, 2] = rng.uniform(-h / 2, h / 2, size=int(side.sum()))
        nrm[side, 0] = np.cos(phi[side])
        nrm[side, 1] = np.sin(phi[side])
        for cap, sign in ((which == 1, 1.0), (which == 2, -1.0)):
            k = int(cap.sum())
            rr = r * np.sqrt(rng.uniform(size=k))
            pts[cap, 0] = rr * np.cos(phi[cap])
            pts[cap, 1] = rr * np.sin(phi[cap])
            pts[cap, 2] = sign * h / 2
            nrm[cap, 2] = sign
        return pts, nrm

    def ray_exit(self, origin, direction):
        o = np.asarray(origin, dtype=float)
        d = _unit(np.asarray(direction, dtype=float))
        r, hh = self.radius, self.height / 2
        best = None
        # lateral wall
        a = d[0] ** 2 + d[1] ** 2
        if a > _RAY_EPS:
            b = o[0] * d[0] + o[1] * d[1]
            c = o[0] ** 2 + o[1] ** 2 - r * r
            disc = b * b - a * c
            if disc >= 0:
                t = (-b + np.sqrt(disc)) / a
                p = o + t * d
                if t > _RAY_EPS and abs(p[2]) <= hh + _RAY_EPS:
                    best = (t, p, np.array([p[0] / r, p[1] / r, 0.0]))
        # caps
        if abs(d[2]) > _RAY_EPS:
            for sign in (1.0, -1.0):
                t = (sign * hh - o[2]) / d[2]
                p = o + t * d
                if t > _RAY_EPS and p[0] ** 2 + p[1] ** 2 <= r * r + _RAY_EPS:
                    if best is None or t > best[0]:
                        best = (t, p, np.array([0.0, 0.0, sign]))
        if best is None:
            return None
        return best[1], best[2]

    def to_dict(self):
        return {"kind": self.kind, "radius": float(self.radius), "height": float(self.height)}


@dataclass(frozen=True)
class Capsule:
    radius: float
    height: float  # cylindrical segment length along z (caps extend beyond)

    kind = "capsule"

    def surface(self, n, rng):
        r, h = self.radius, self.height
        a_side = 2 * np.pi * r * h
        a_caps = 4 * np.pi * r * r  # the two hemispheres form a full sphere
        which = rng.choice(2, size=n, p=np.array([a_side, a_caps]) / (a_side + a_caps))
        pts = np.empty((n, 3))
        nrm = np.empty((n, 3))
        side = which == 0
        k = int(side.sum())
        phi = rng.uniform(0, 2 * np.pi, size=k)
        pts[side, 0] = r * np.cos(phi)
        pts[side, 1] = r * np.sin(phi)
        pts[side, 2] = rng.uniform(-h / 2, h / 2, size=k)
        nrm[side] = np.column_stack([np.cos(phi), np.sin(phi), np.zeros(k)])
        caps = ~side
        dirs = _sample_sphere_dirs(rng, int(caps.sum()))
        centers = np.where(dirs[:, 2:3] >= 0, h / 2, -h / 2)
        pts[caps] = dirs * r + np.concatenate([np.zeros((len(dirs), 2)), centers], axis=1)
        nrm[caps] = dirs
        return pts, nrm

    def ray_exit(self, origin, direction):
        o = np.asarray(origin, dtype=float)
        d = _unit(np.asarray(direction, dtype=float))
        r, hh = self.radius, self.height / 2
        best = None
        a = d[0] ** 2 + d[1] ** 2
        if a > _RAY_EPS:
            b = o[0] * d[0] + o[1] * d[1]
            c = o[0] ** 2 + o[1] ** 2 - r * r
            disc = b * b - a * c
            if disc >= 0:
                t = (-b + np.sqrt(disc)) / a
                p = o + t * d
                if t > _RAY_EPS and abs(p[2]) <= hh + _RAY_EPS:
                    best = (t, p, np.array([p[0] / r, p[1] / r, 0.0]))
        for sign in (1.0, -1.0):
            center = np.array([0.0, 0.0, sign * hh])
            oc = o - center
            b = oc @ d
            c = oc @ oc - r * r
            disc = b * b - c
            if disc < 0:
                continue
            t = -b + np.sqrt(disc)
            p = o + t * d
            if t > _RAY_EPS and (p[2] - center[2]) * sign >= -_RAY_EPS:
                if best is None or t > best[0]:
                    best = (t, p, (p - center) / r)
        if best is None:
            return None
        return best[1], best[2]

    def to_dict(self):
        return {"kind": self.kind, "radius": float(self.radius), "height": float(self.height)}


_KINDS = {"box": Box, "sphere": Sphere, "cylinder": Cylinder, "capsule": Capsule}


def shape_from_dict(doc):
    kind = doc["kind"]
    if kind == "box":
        return Box(tuple(doc["half_extents"]))
    if kind == "sphere":
        return Sphere(doc["radius"])
    if kind == "cylinder":
        return Cylinder(doc["radius"], doc["height"])
    if kind == "capsule":
        return Capsule(doc["radius"], doc["height"])
    raise ValueError(f"unknown shape kind {kind!r}")


def random_primitive(rng, max_opening: float = 0.08):
    """Draw a random graspable primitive: at least one span fits the gripper."""
    kind = rng.choice(["box", "cylinder", "sphere", "capsule"])
    thin_hi = max_opening / 2 - 0.005  # half-extent that keeps the span grippable
    if kind == "box":
        hx = rng.uniform(0.018, thin_hi)
        hy = rng.uniform(0.018, thin_hi)
        hz = rng.uniform(0.05, 0.10)
        return Box((hx, hy, hz))
    if kind == "cylinder":
        return Cylinder(rng.uniform(0.015, thin_hi), rng.uniform(0.10, 0.20))
    if kind == "sphere":
        return Sphere(rng.uniform(0.022, thin_hi))
    return Capsule(rng.uniform(0.015, 0.028), rng.uniform(0.06, 0.12))
