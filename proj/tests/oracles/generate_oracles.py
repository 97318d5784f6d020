# Regenerates the frozen reference values used by the statistics and loss
# tests. Run with python3; needs mpmath, numpy, scipy and statsmodels.
import mpmath as mp, numpy as np, scipy.stats as st, statsmodels.api as sm
mp.mp.dps = 50
pairs = [(0.5,1),(1.0,2),(2.0,3),(-1.5,4.5),(2.5,10),(0.1,30),(3.0,7.3),(-4.0,15),(1.96,100),(6.0,25)]
def tp(t, v):
    t = mp.mpf(t); v = mp.mpf(v)
    x = v/(v+t*t)
    return mp.betainc(v/2, mp.mpf(1)/2, 0, x, regularized=True)
for t,v in pairs: print("T", t, v, mp.nstr(tp(t,v), 20))
x=[19.1,21.3,18.7,22.0,20.5,19.9,23.1]; y=[17.2,18.9,16.5,19.8,18.1]
r=st.ttest_ind(x,y,equal_var=False); print("WELCH", repr(r.statistic), repr(r.pvalue))
a=[1.1,2.2,2.2,3.5,4.0,5.1,6.3,7.7]; b=[2.2,3.0,3.5,8.1,9.4,9.9,10.2]
r=st.mannwhitneyu(a,b,alternative='two-sided',method='asymptotic',use_continuity=True); print("MWU", r.statistic, repr(r.pvalue))
a2=list(range(1,8)); b2=[x+0.5 for x in range(4,12)]
r=st.mannwhitneyu(a2,b2,alternative='two-sided',method='asymptotic',use_continuity=True); print("MWU2", r.statistic, repr(r.pvalue))
rng=np.random.default_rng(3); n=20
age=rng.uniform(20,80,n).round(1); sex=rng.integers(0,2,n); days=rng.uniform(0,60,n).round(0); vac=np.array([0,1]*10)
y=5+2*vac+0.1*age-1.5*sex+0.05*days+rng.normal(0,1,n).round(3)
X=sm.add_constant(np.column_stack([vac,age,sex,days]).astype(float)); m=sm.OLS(y,X).fit()
print("OLSDATA y", ",".join(repr(float(v)) for v in y))
print("age", ",".join(repr(float(v)) for v in age)); print("sex", ",".join(str(int(v)) for v in sex)); print("days", ",".join(repr(float(v)) for v in days))
print("params", [repr(v) for v in m.params]); print("bse", [repr(v) for v in m.bse]); print("p", [repr(v) for v in m.pvalues]); print("r2", repr(m.rsquared))
print("Q", np.quantile([3.0,1.0,4.0,1.0,5.0,9.0,2.0,6.0],[0.25,0.5,0.75]))
# loss oracle: N elems per class, half positive, p=0.5
N=2*1*4*4; eps=1e-5
T=N/2; I=0.5*T; P=0.5*N
dice=1-(2*I+eps)/(P+T+eps); bce=np.log(2)
print("LOSS", repr((dice+bce)/2))
