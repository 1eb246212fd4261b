"""Human-preference statistics for the two listening-test win counts (n = 420)."""

from distreward.eval_stats import binomial_test_one_sided, clopper_pearson_lower, posterior_prob_win

N = 420

if __name__ == "__main__":
    print("wins  trials  win_rate  binomial_p  cp_lower(95%)  P(w>0.5)")
    for k in (253, 256):
        print(f"{k:4d}  {N:6d}  {k / N:8.4f}  {binomial_test_one_sided(k, N):10.3e}  "
              f"{clopper_pearson_lower(k, N):13.4f}  {posterior_prob_win(k, N):.6f}")
