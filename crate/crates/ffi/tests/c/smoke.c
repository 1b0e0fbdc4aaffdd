#include <math.h>
#include <stdio.h>
#include <string.h>

#include "wiener_cubature.h"

#define CHECK(cond)                                                   \
  do {                                                                \
    if (!(cond)) {                                                    \
      char msg[256];                                                  \
      wc_last_error_message(msg, sizeof msg);                         \
      fprintf(stderr, "line %d: %s (%s)\n", __LINE__, #cond, msg);    \
      return 1;                                                       \
    }                                                                 \
  } while (0)

int main(void) {
  WcFormula *f = NULL;
  CHECK(wc_formula_nv(2, 5, &f) == WC_STATUS_OK);
  CHECK(wc_formula_len(f) == 18);

  double defect = 1.0;
  bool passed = false;
  CHECK(wc_formula_verify_order(f, 5, &defect, &passed) == WC_STATUS_OK);
  CHECK(passed && defect <= 1e-10);

  WcHestonParams p;
  CHECK(wc_heston_benchmark_params(&p) == WC_STATUS_OK);
  double m[4];
  CHECK(wc_heston_exact_moments(&p, 0.25, m) == WC_STATUS_OK);
  CHECK(fabs(m[0] - 2.192936689144854) < 1e-12);

  WcModel *model = NULL;
  CHECK(wc_model_heston(&p, &model) == WC_STATUS_OK);
  CHECK(wc_model_dim(model) == 2);

  WcPayoff one = {WC_PAYOFF_KIND_POWER, 0, 0.0, 0, 0.0};
  WcPlan plan = wc_plan_default();
  double x[2] = {p.x0, p.v0};
  double value = 0.0, se = -1.0;
  CHECK(wc_compose(model, f, &one, x, 2, 0.25, 2, WC_MESH_KIND_UNIFORM, 1.0, &plan, &value, &se) ==
        WC_STATUS_OK);
  CHECK(fabs(value - 1.0) < 1e-12 && se == 0.0);

  p.kappa = -1.0;
  WcModel *bad = NULL;
  CHECK(wc_model_heston(&p, &bad) == WC_STATUS_INVALID_ARGUMENT && bad == NULL);
  CHECK(wc_last_error_message(NULL, 0) > 0);

  wc_model_free(model);
  wc_formula_free(f);
  printf("ok %s\n", wc_version());
  return 0;
}
