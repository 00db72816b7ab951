"""Monte Carlo tables for the Gaussian model without regressors.

A reduced version of the bias/dispersion and coverage tables.  The closed
form rows are exact; the Monte Carlo rows use few replications here, so
expect noise in the second decimal.  The command line equivalent is

    ifepanel simulate --grid standard --reps 2000 --out table1.csv
"""

import sys

from ifepanel import DgpSpec, render_tables, run_mc

reps = int(sys.argv[1]) if len(sys.argv) > 1 else 200
results = [run_mc(DgpSpec("linear_nonreg", N, T, seed=42), reps) for N, T in ((10, 10), (25, 10), (25, 25))]
tables = render_tables(results)
print(tables.table1_text)
print(tables.table2_text)
