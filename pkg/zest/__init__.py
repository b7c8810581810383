# Zest package
