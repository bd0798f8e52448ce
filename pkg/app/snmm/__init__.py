# snmm package
