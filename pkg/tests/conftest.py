import os

# Cap BLAS pools before numpy loads anywhere in the suite: bit-identical
# replay checks assume a fixed thread count of one.
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")
