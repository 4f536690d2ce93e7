# app/core/status_codes.py
# 进程退出码

# 成功
OK = 0

# 运行期失败（未归类的异常）
RUNTIME_FAILURE = 1

# 命令行用法错误（未知参数、缺少子命令）
USAGE = 2

# 权重文件格式错误（魔数、版本、截断、结构不匹配）
WEIGHT_FORMAT = 3

# 拒绝导出（输入已经是重参数化后的权重）
EXPORT_REFUSED = 4

# 训练发散（loss 出现 NaN / 梯度非有限）
DIVERGED = 5

# 配置或路径不合法
INVALID_CONFIG = 6
