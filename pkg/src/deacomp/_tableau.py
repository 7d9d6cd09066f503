"""Dormand-Prince 5(4) coefficients shared by the Python and compiled kernels.

Both backends import these exact float values so that they step identically.
"""

C2, C3, C4, C5 = 1 / 5, 3 / 10, 4 / 5, 8 / 9

A21 = 1 / 5
A31, A32 = 3 / 40, 9 / 40
A41, A42, A43 = 44 / 45, -56 / 15, 32 / 9
A51, A52, A53, A54 = 19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729
A61, A62, A63, A64, A65 = 9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656

B1, B3, B4, B5, B6 = 35 / 384, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84

# difference between the 5th- and 4th-order weights (7 stages, FSAL)
E1, E3, E4, E5, E6, E7 = (-71 / 57600, 71 / 16695, -71 / 1920, 17253 / 339200,
                          -22 / 525, 1 / 40)

# Continuous extension (Shampine's c6-optimal quartic): row i gives the
# coefficients of theta, theta^2, theta^3, theta^4 for stage i.
DENSE_P = (
    (1.0, -8048581381 / 2820520608, 8663915743 / 2820520608, -12715105075 / 11282082432),
    (0.0, 0.0, 0.0, 0.0),
    (0.0, 131558114200 / 32700410799, -68118460800 / 10900136933, 87487479700 / 32700410799),
    (0.0, -1754552775 / 470086768, 14199869525 / 1410260304, -10690763975 / 1880347072),
    (0.0, 127303824393 / 49829197408, -318862633887 / 49829197408,
     701980252875 / 199316789632),
    (0.0, -282668133 / 205662961, 2019193451 / 616988883, -1453857185 / 822651844),
    (0.0, 40617522 / 29380423, -110615467 / 29380423, 69997945 / 29380423),
)


def _at_half(row):
    return row[0] * 0.5 + row[1] * 0.25 + row[2] * 0.125 + row[3] * 0.0625


# midpoint weights: y(t + h/2) ~ y + h * sum(D_i k_i)
D1, _D2, D3, D4, D5, D6, D7 = (_at_half(row) for row in DENSE_P)

SAFETY = 0.9
MIN_FACTOR = 0.2
MAX_FACTOR = 5.0
EXPONENT = 0.2
