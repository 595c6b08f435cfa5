#!/usr/bin/env python3
"""Reference benefit curve for a records CSV, computed by direct enumeration.

Usage: golden_curve.py RECORDS.csv C_EARLY C_FINAL > curve.csv
"""
import csv
import sys


def main():
    path, c_early, c_final = sys.argv[1], int(sys.argv[2]), int(sys.argv[3])
    rows = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        next(reader)
        for row in reader:
            label, k = int(row[1]), int(row[2])
            ee = [float(v) for v in row[3:3 + k]]
            ef = [float(v) for v in row[3 + k:3 + 2 * k]]
            rows.append((label, ee, ef))

    n = len(rows)
    out = ["rho,accuracy,flops,ee_rate"]
    for i in range(101):
        rho = i / 100.0
        correct = early = cost = 0
        for label, ee, ef in rows:
            top = max(ee)
            head = ee if top >= rho else ef
            if top >= rho:
                early += 1
                cost += c_early
            else:
                cost += c_final
            correct += head.index(max(head)) == label
        out.append("%.9g,%.9g,%.9g,%.9g" % (rho, correct / n, cost / n, early / n))
    sys.stdout.write("\n".join(out) + "\n")


if __name__ == "__main__":
    main()
