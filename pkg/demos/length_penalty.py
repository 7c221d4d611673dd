"""The saturating length penalty, plotted in ASCII.

Marginal cost of the t-th token is (1 + k*t)^(-q): the first token
always costs 1, later tokens cost less and less, with q controlling how
hard the discount kicks in. The penalty C(x) is the integral of that
marginal cost, so C(0) = 0 and C'(0) = 1 whatever the knobs say, and
the composite reward subtracts lambda * C(tokens).
"""

from deskrl.reward import length_penalty


def bar(value: float, scale: float, width: int = 46) -> str:
    return "#" * int(round(width * value / scale))


def main() -> None:
    k = 0.01
    print(f"k = {k}: penalty vs generated tokens for three curvatures\n")
    xs = [0, 50, 100, 200, 400, 800, 1600]
    top = length_penalty(1600, k, 0.0)
    for q in (0.0, 0.5, 1.0, 2.0):
        print(f"q = {q}")
        for x in xs:
            c = length_penalty(float(x), k, q)
            print(f"  {x:5d} {c:9.2f} {bar(c, top)}")
        print()

    # q = 0 is exactly linear, q = 1 exactly logarithmic
    print("closed forms as sanity anchors:")
    print(f"  C(100; k=0.01, q=0) = {length_penalty(100, 0.01, 0.0):.6f}  (x itself)")
    print(f"  C(100; k=0.01, q=1) = {length_penalty(100, 0.01, 1.0):.6f}  (100 ln 2 = 69.314718)")
    h = 1e-7
    print(f"  C'(0) by finite difference: {length_penalty(h, k, 2.0) / h:.9f}")


if __name__ == "__main__":
    main()
