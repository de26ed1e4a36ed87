# версия артефакта — пишется в каждый файл результатов
ARTIFACT_VERSION = "0.3.0"

# куда складывать прогоны (одна папка на прогон)
OUTPUT_DIR = "data/runs"

# база результатов внутри папки прогона
RESULTS_DB_NAME = "results.db"

# уровень логирования по умолчанию
LOG_LEVEL = "INFO"

# сколько потоков на оценку тестовых задач
DEFAULT_THREADS = 1

# сетки конечных разностей для ODE: данные задач и "истинное" значение
ODE_GRID = 256
ODE_TRUTH_GRID = 8192

# окно сглаживания для монитора стационарности
STATIONARITY_WINDOW = 50

# сетка длин шкалы для control functionals: число точек и диапазон (множители медианы квадратов расстояний)
CF_GRID_SIZE = 20
CF_GRID_MIN = 1e-2
CF_GRID_MAX = 1e2
