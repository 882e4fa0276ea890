"""
A virtual patient eats lunch
============================

Start the nominal twin at rest on its equilibrium basal rate, feed it a
60 g meal with and without a matching bolus, and watch the sensor glucose
over the next five hours.
"""

import numpy as np

from glyforge import hovorka as hv
from glyforge.synth import calibrate_ratio

params = hv.NOMINAL
g_rest = 120.0

# basal (mU/kg/min) that holds glucose flat at 120 mg/dL
u_basal = hv.equilibrium_basal(g_rest, params)
print(f"equilibrium basal: {u_basal:.4f} mU/kg/min "
      f"= {u_basal * 60 * params.BW / 1000:.2f} U/hr for {params.BW:.0f} kg")

x0 = hv.steady_state_init(g_rest, 0.0, u_basal, params)
steps = 60  # 5 hours of 5-minute steps

###############################################################################
# The meal enters as a one-step carbohydrate pulse (g/min over 5 minutes).
# The bolus is sized by the twin's own carbohydrate ratio.

icr = calibrate_ratio(params, g_rest, u_basal, carbs=60.0)
bolus_units = 60.0 / icr
print(f"carbohydrate ratio {icr:.1f} g/U -> bolus {bolus_units:.2f} U")

u_G = np.zeros(steps)
u_G[0] = 60.0 / hv.T_S

no_bolus = np.full(steps, u_basal)
with_bolus = no_bolus.copy()
with_bolus[0] += bolus_units * 1000.0 / (params.BW * hv.T_S)

_, cgm_plain = hv.simulate(x0, params, no_bolus, u_G)
_, cgm_bolus = hv.simulate(x0, params, with_bolus, u_G)

print("\n  min   no bolus   with bolus")
for k in range(0, steps + 1, 6):
    print(f"{5 * k:5d} {cgm_plain[k]:10.1f} {cgm_bolus[k]:12.1f}")

###############################################################################
# Without insulin the peak is higher and glucose settles above where it
# started; the calibrated bolus brings it back near 120 mg/dL.

print(f"\npeak without bolus {cgm_plain.max():.0f}, with bolus {cgm_bolus.max():.0f} mg/dL")
