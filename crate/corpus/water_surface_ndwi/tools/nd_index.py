import json
import os
import shlex
import shutil
import subprocess
import sys

def read_grid(path):
    with open(path) as f:
        lines = f.read().split("\n")
    header = {}
    i = 0
    while i < len(lines):
        parts = lines[i].split()
        if len(parts) == 2 and parts[0][0].isalpha():
            header[parts[0].lower()] = parts[1]
            i += 1
        else:
            break
    cells = []
    for line in lines[i:]:
        cells.extend(float(v) for v in line.split())
    return {
        "ncols": int(header["ncols"]),
        "nrows": int(header["nrows"]),
        "xll": header.get("xllcorner", "0"),
        "yll": header.get("yllcorner", "0"),
        "cellsize": float(header["cellsize"]),
        "nodata": float(header.get("nodata_value", "-9999")),
        "cells": cells,
    }


def write_grid(path, g, cells):
    n = g["ncols"]
    with open(path, "w") as f:
        f.write("ncols %d\nnrows %d\n" % (n, g["nrows"]))
        f.write("xllcorner %s\nyllcorner %s\n" % (g["xll"], g["yll"]))
        f.write("cellsize %r\nNODATA_value %r\n" % (g["cellsize"], g["nodata"]))
        for r in range(g["nrows"]):
            f.write(" ".join(repr(float(v)) for v in cells[r * n:(r + 1) * n]) + "\n")


def copy_prj(src, dst):
    prj = os.path.splitext(src)[0] + ".prj"
    if os.path.exists(prj):
        shutil.copyfile(prj, os.path.splitext(dst)[0] + ".prj")


def valid(g):
    return [v for v in g["cells"] if v != g["nodata"]]


def hit(v, op, t):
    if op == "gt":
        return v > t
    if op == "lt":
        return v < t
    return v == t


def norm_diff(a, b):
    out = []
    for x, y in zip(a["cells"], b["cells"]):
        if x == a["nodata"] or y == b["nodata"] or x + y == 0:
            out.append(a["nodata"])
        else:
            out.append((x - y) / (x + y))
    return out


def artifact(name, path, kind):
    return {"name": name, "path": os.path.relpath(path), "kind": kind}


def write_manifest(artifacts, results=None):
    doc = {"artifacts": artifacts}
    if results is not None:
        doc["results"] = results
    with open("manifest.json", "w") as f:
        json.dump(doc, f, indent=2)


*inputs, out = sys.argv[1:]
a, b = read_grid(inputs[0]), read_grid(inputs[1])
write_grid(out, a, norm_diff(a, b))
